#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <png.h>
#include <zlib.h>

#include "common.hpp"
#include "detector.hpp"
#include "geometry.hpp"
#include "motion.hpp"
#include "phantom.hpp"
#include "volume.hpp"

namespace cbctmotion {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Text and JSON files

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary file and renames it into place.
inline void write_bytes(const fs::path& path, const void* data, std::size_t size) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, text.data(), text.size());
}

inline Json read_json(const fs::path& path) {
    try {
        return Json::parse(read_text(path));
    } catch (const Json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

/// Runs `body` and rethrows JSON access errors (missing keys, wrong types) as
/// validation errors naming the document.
template <class F>
auto json_guard(const std::string& what, F&& body) {
    try {
        return body();
    } catch (const Json::exception& e) {
        throw ValidationError("invalid " + what + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Eigen and domain types

inline Json to_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const Json& j) {
    require(j.is_array() && j.size() == 3, "expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

template <int R, int C>
Json matrix_to_json(const Eigen::Matrix<double, R, C>& m) {
    Json rows = Json::array();
    for (int r = 0; r < R; ++r) {
        Json row = Json::array();
        for (int c = 0; c < C; ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

template <int R, int C>
Eigen::Matrix<double, R, C> matrix_from_json(const Json& j) {
    require(j.is_array() && j.size() == R, "matrix has the wrong number of rows");
    Eigen::Matrix<double, R, C> m;
    for (int r = 0; r < R; ++r) {
        require(j[r].is_array() && j[r].size() == C, "matrix has the wrong number of columns");
        for (int c = 0; c < C; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

inline Json to_json(const ScanGeometry& g) {
    return {{"sdd", g.sdd},
            {"sad", g.sad},
            {"det_rows", g.det_rows},
            {"det_cols", g.det_cols},
            {"pixel_pitch", g.pixel_pitch},
            {"fov_radius", g.fov_radius},
            {"fov_height", g.fov_height},
            {"scan_arc", g.scan_arc},
            {"scan_duration", g.scan_duration},
            {"n_frames", g.n_frames}};
}

/// Missing keys keep their defaults.
inline ScanGeometry geometry_from_json(const Json& j, ScanGeometry g = {}) {
    return json_guard("geometry", [&] {
        g.sdd = j.value("sdd", g.sdd);
        g.sad = j.value("sad", g.sad);
        g.det_rows = j.value("det_rows", g.det_rows);
        g.det_cols = j.value("det_cols", g.det_cols);
        g.pixel_pitch = j.value("pixel_pitch", g.pixel_pitch);
        g.fov_radius = j.value("fov_radius", g.fov_radius);
        g.fov_height = j.value("fov_height", g.fov_height);
        g.scan_arc = j.value("scan_arc", g.scan_arc);
        g.scan_duration = j.value("scan_duration", g.scan_duration);
        g.n_frames = j.value("n_frames", g.n_frames);
        g.validate();
        return g;
    });
}

inline Json to_json(const Trajectory& t) {
    Json frames = Json::array();
    for (const auto& f : t.frames)
        frames.push_back({{"index", f.index}, {"beta", f.beta}, {"time", f.time}, {"P", matrix_to_json(f.P)}});
    return {{"geometry", to_json(t.geometry)}, {"frames", frames}};
}

inline Trajectory trajectory_from_json(const Json& j) {
    return json_guard("trajectory", [&] {
        Trajectory t;
        t.geometry = geometry_from_json(j.at("geometry"));
        for (const auto& f : j.at("frames")) {
            FrameGeometry fg;
            fg.index = f.at("index").get<int>();
            fg.beta = f.at("beta").get<double>();
            fg.time = f.at("time").get<double>();
            fg.P = matrix_from_json<3, 4>(f.at("P"));
            t.frames.push_back(fg);
        }
        require(static_cast<int>(t.frames.size()) == t.geometry.n_frames,
                "trajectory frame count does not match n_frames");
        return t;
    });
}

inline Json to_json(const Grid& g) {
    return {{"dims", g.dims}, {"spacing", to_json(g.spacing)}, {"origin", to_json(g.origin)}};
}

inline Grid grid_from_json(const Json& j) {
    return json_guard("grid", [&] {
        Grid g;
        g.dims = j.at("dims").get<std::array<int, 3>>();
        g.spacing = vec3_from_json(j.at("spacing"));
        g.origin = vec3_from_json(j.at("origin"));
        return g;
    });
}

inline Json to_json(const Primitive& p) {
    return {{"shape", to_string(p.shape)},       {"center", to_json(p.center)},
            {"extent", to_json(p.extent)},       {"orientation", matrix_to_json(p.orientation)},
            {"attenuation", p.attenuation},      {"additive", p.additive}};
}

inline Json to_json(const PhantomSpec& s) {
    Json prims = Json::array();
    for (const auto& p : s.primitives) prims.push_back(to_json(p));
    return {{"seed", s.seed}, {"metal", s.metal}, {"primitives", prims}};
}

inline PhantomSpec phantom_from_json(const Json& j) {
    return json_guard("phantom", [&] {
        PhantomSpec s;
        s.seed = j.value("seed", std::uint64_t{0});
        s.metal = j.value("metal", false);
        for (const auto& p : j.at("primitives")) {
            Primitive q;
            q.shape = parse_shape(p.at("shape").get<std::string>());
            q.center = vec3_from_json(p.at("center"));
            q.extent = vec3_from_json(p.at("extent"));
            q.orientation = p.contains("orientation") ? matrix_from_json<3, 3>(p.at("orientation"))
                                                      : Mat3::Identity();
            q.attenuation = p.at("attenuation").get<double>();
            q.additive = p.value("additive", true);
            s.primitives.push_back(q);
        }
        s.validate();
        return s;
    });
}

inline Json to_json(const AugmentSpec& a) {
    return {{"scale", a.scale}, {"rotation_deg", to_json(a.rotation_deg)},
            {"translation_mm", to_json(a.translation_mm)}};
}

inline AugmentSpec augment_from_json(const Json& j) {
    return json_guard("augmentation", [&] {
        AugmentSpec a;
        a.scale = j.value("scale", 1.0);
        if (j.contains("rotation_deg")) a.rotation_deg = vec3_from_json(j.at("rotation_deg"));
        if (j.contains("translation_mm")) a.translation_mm = vec3_from_json(j.at("translation_mm"));
        a.validate();
        return a;
    });
}

inline Json to_json(const MotionSpec& m) {
    return {{"scenario", m.scenario()},
            {"amplitude", m.amplitude},
            {"t_start", m.t_start},
            {"t_end", m.t_end},
            {"tremor_frequency", m.tremor_frequency},
            {"rd_fraction", m.rd_fraction},
            {"transition_time", m.transition_time},
            {"translation_direction", to_json(m.translation_direction)},
            {"pivot", to_json(m.pivot)},
            {"allow_override", m.allow_override}};
}

inline MotionSpec motion_from_json(const Json& j) {
    return json_guard("motion spec", [&] {
        MotionSpec m;
        apply_scenario(m, j.at("scenario").get<std::string>());
        m.amplitude = j.value("amplitude", m.amplitude);
        m.t_start = j.value("t_start", m.t_start);
        m.t_end = j.value("t_end", m.t_end);
        m.tremor_frequency = j.value("tremor_frequency", m.tremor_frequency);
        m.rd_fraction = j.value("rd_fraction", m.rd_fraction);
        m.transition_time = j.value("transition_time", m.transition_time);
        if (j.contains("translation_direction"))
            m.translation_direction = vec3_from_json(j.at("translation_direction"));
        if (j.contains("pivot")) m.pivot = vec3_from_json(j.at("pivot"));
        m.allow_override = j.value("allow_override", false);
        // the scan duration is checked again when the motion is sampled
        m.validate(std::numeric_limits<double>::infinity());
        return m;
    });
}

inline Json to_json(std::span<const RigidMotionFrame> frames) {
    Json arr = Json::array();
    for (const auto& f : frames)
        arr.push_back({{"frame", f.frame},
                       {"rotation_deg", to_json(f.rotation_deg)},
                       {"translation_mm", to_json(f.translation_mm)},
                       {"pivot", to_json(f.pivot)}});
    return arr;
}

inline std::vector<RigidMotionFrame> motion_frames_from_json(const Json& j) {
    return json_guard("motion frames", [&] {
        std::vector<RigidMotionFrame> out;
        for (const auto& f : j) {
            RigidMotionFrame m;
            m.frame = f.at("frame").get<int>();
            m.rotation_deg = vec3_from_json(f.at("rotation_deg"));
            m.translation_mm = vec3_from_json(f.at("translation_mm"));
            if (f.contains("pivot")) m.pivot = vec3_from_json(f.at("pivot"));
            out.push_back(m);
        }
        return out;
    });
}

inline Json to_json(const TrainingConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"epochs", c.epochs},
            {"batch_size", c.batch_size},       {"seed", c.seed}};
}

inline TrainingConfig training_config_from_json(const Json& j, TrainingConfig c = {}) {
    return json_guard("training config", [&] {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.momentum = j.value("momentum", c.momentum);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        return c;
    });
}

inline Json to_json(const LogisticScorer& s) {
    return {{"model", "logistic"},
            {"features", feature_names()},
            {"mean", s.mean},
            {"scale", s.scale},
            {"weights", s.weights},
            {"bias", s.bias},
            {"training", to_json(s.config)},
            {"loss_trace", s.loss_trace}};
}

inline LogisticScorer scorer_from_json(const Json& j) {
    return json_guard("scorer", [&] {
        require(j.at("model").get<std::string>() == "logistic", "unsupported scorer model");
        require(j.at("features").get<std::array<std::string, kFeatureCount>>() == feature_names(),
                "scorer was trained on a different feature set");
        LogisticScorer s;
        s.mean = j.at("mean").get<FeatureVector>();
        s.scale = j.at("scale").get<FeatureVector>();
        s.weights = j.at("weights").get<FeatureVector>();
        s.bias = j.at("bias").get<double>();
        s.config = training_config_from_json(j.at("training"));
        s.loss_trace = j.value("loss_trace", std::vector<double>{});
        for (double v : s.scale) require(v > 0.0, "scorer scale entries must be positive");
        return s;
    });
}

// ---------------------------------------------------------------------------
// Raw arrays with sidecars

inline std::uint32_t crc32_of(const void* data, std::size_t size) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

inline std::string hex32(std::uint32_t v) {
    std::ostringstream ss;
    ss << std::hex << std::setw(8) << std::setfill('0') << v;
    return ss.str();
}

/// Sidecar path for a payload: the payload path with its extension replaced
/// by ".json".
inline fs::path sidecar_path(const fs::path& payload) {
    fs::path p = payload;
    p.replace_extension(".json");
    return p;
}

namespace detail {

inline std::vector<float> to_little_endian(std::vector<float> v) {
    if constexpr (std::endian::native == std::endian::big)
        for (float& f : v) {
            auto u = std::bit_cast<std::uint32_t>(f);
            u = __builtin_bswap32(u);
            f = std::bit_cast<float>(u);
        }
    return v;
}

inline void write_float_payload(const fs::path& payload, const std::vector<float>& values, Json sidecar) {
    const std::vector<float> le = to_little_endian(values);
    const std::size_t bytes = le.size() * sizeof(float);
    sidecar["dtype"] = "float32";
    sidecar["byte_order"] = "little";
    sidecar["payload"] = payload.filename().string();
    sidecar["crc32"] = hex32(crc32_of(le.data(), bytes));
    write_bytes(payload, le.data(), bytes);
    write_json(sidecar_path(payload), sidecar);
}

inline std::vector<float> read_float_payload(const fs::path& payload, const Json& sidecar,
                                             std::size_t expected_count) {
    if (sidecar.value("dtype", "") != "float32" || sidecar.value("byte_order", "") != "little")
        throw IoError(payload.string() + ": unsupported dtype or byte order");
    std::ifstream in(payload, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + payload.string());
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size != expected_count * sizeof(float))
        throw IoError(payload.string() + ": payload holds " + std::to_string(size) +
                      " bytes but the sidecar dims require " + std::to_string(expected_count * sizeof(float)));
    std::vector<float> v(expected_count);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("read failed for " + payload.string());
    const std::string want = sidecar.value("crc32", "");
    const std::string got = hex32(crc32_of(v.data(), size));
    if (want != got) throw IntegrityError(payload.string() + ": checksum " + got + " does not match sidecar " + want);
    return to_little_endian(std::move(v));
}

} // namespace detail

inline void write_volume(const fs::path& payload, const Volume& v) {
    Json side = to_json(v.grid);
    side["kind"] = "volume";
    side["index_order"] = "z,y,x";
    detail::write_float_payload(payload, v.values, side);
}

inline Volume read_volume(const fs::path& payload) {
    const Json side = read_json(sidecar_path(payload));
    if (side.value("kind", "") != "volume") throw IoError(payload.string() + ": sidecar is not a volume");
    Volume v;
    v.grid = json_guard("volume sidecar", [&] { return grid_from_json(side); });
    for (int d : v.grid.dims)
        if (d <= 0) throw IoError(payload.string() + ": sidecar dims must be positive");
    v.values = detail::read_float_payload(payload, side, v.grid.voxel_count());
    return v;
}

inline void write_stack(const fs::path& payload, const ProjectionStack& s) {
    Json side = {{"kind", "projections"},
                 {"dims", {s.frames, s.rows, s.cols}},
                 {"index_order", "frame,row,col"}};
    detail::write_float_payload(payload, s.values, side);
}

inline ProjectionStack read_stack(const fs::path& payload) {
    const Json side = read_json(sidecar_path(payload));
    if (side.value("kind", "") != "projections")
        throw IoError(payload.string() + ": sidecar is not a projection stack");
    const auto dims = json_guard("stack sidecar", [&] { return side.at("dims").get<std::array<int, 3>>(); });
    for (int d : dims)
        if (d <= 0) throw IoError(payload.string() + ": sidecar dims must be positive");
    ProjectionStack s;
    s.frames = dims[0];
    s.rows = dims[1];
    s.cols = dims[2];
    s.values = detail::read_float_payload(payload, side, static_cast<std::size_t>(s.frames) * s.rows * s.cols);
    return s;
}

// ---------------------------------------------------------------------------
// PNG

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    RgbImage() = default;
    RgbImage(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

    void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
        rgb[i] = r;
        rgb[i + 1] = g;
        rgb[i + 2] = b;
    }
};

namespace detail {

inline void write_png_rows(const fs::path& path, int width, int height, int color_type, int channels,
                           const std::uint8_t* data) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace detail

/// 8-bit grayscale PNG of an image with values in [0, 1] (clamped).
inline void write_png(const fs::path& path, const Image& img) {
    std::vector<std::uint8_t> px(img.pixels.size());
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
    detail::write_png_rows(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 1, px.data());
}

inline void write_png(const fs::path& path, const RgbImage& img) {
    detail::write_png_rows(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 3, img.rgb.data());
}

/// Decoded 8-bit grayscale PNG scaled to [0, 1].
inline Image read_png_gray(const fs::path& path) {
    png_image im{};
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str())) throw IoError("cannot read PNG " + path.string());
    im.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&im);
        throw IoError("cannot decode PNG " + path.string());
    }
    Image img(static_cast<int>(im.width), static_cast<int>(im.height));
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
    return img;
}

} // namespace cbctmotion

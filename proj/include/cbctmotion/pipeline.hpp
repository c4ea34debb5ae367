#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "detector.hpp"
#include "eval.hpp"
#include "geometry.hpp"
#include "io.hpp"
#include "motion.hpp"
#include "phantom.hpp"
#include "projector.hpp"
#include "recon.hpp"

namespace cbctmotion {

/// Array sizes for a run. Everything downstream of a preset is fixed by it.
struct Preset {
    std::string name;
    ScanGeometry geometry;
    Grid grid;
    int n_slices = 96;
    int slice_size = 256;
};

inline Preset desk_preset() {
    Preset p;
    p.name = "desk";
    p.geometry.det_rows = 256;
    p.geometry.det_cols = 256;
    p.geometry.pixel_pitch = 0.84;
    p.geometry.n_frames = 360;
    p.grid = Grid::centered({128, 128, 128}, 0.8);
    p.n_slices = 96;
    p.slice_size = 256;
    return p;
}

inline Preset full_preset() {
    Preset p;
    p.name = "full";
    p.geometry = ScanGeometry{};
    p.grid = Grid::centered({420, 420, 440}, 0.25);
    p.n_slices = 300;
    p.slice_size = 256;
    return p;
}

inline Preset preset_by_name(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "full") return full_preset();
    throw ConfigError("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// Scans

struct ScanRecipe {
    std::string id = "scan";
    PhantomKind kind = PhantomKind::Medium;
    bool metal = false;
    std::uint64_t phantom_seed = 0;
    std::vector<AugmentSpec> augmentations;
    /// Applied in list order; empty means a static scan.
    std::vector<MotionSpec> motions;

    std::string scenario() const {
        if (motions.empty()) return "none";
        std::string s = motions.front().scenario();
        for (std::size_t i = 1; i < motions.size(); ++i) s += "+" + motions[i].scenario();
        return s;
    }
};

inline PhantomSpec build_phantom(const ScanRecipe& r) {
    PhantomSpec spec = default_phantom(r.kind, r.metal, r.phantom_seed);
    for (const auto& a : r.augmentations) spec = augment(spec, a);
    return spec;
}

/// Per-frame object pose, composed so that later motions act on the result
/// of earlier ones.
inline std::vector<Mat4> build_motion(const ScanRecipe& r, const Trajectory& traj) {
    std::vector<Mat4> m(traj.frames.size(), Mat4::Identity());
    for (const auto& spec : r.motions) {
        const auto frames = sample_motion(spec, traj);
        for (std::size_t k = 0; k < m.size(); ++k)
            if (!frames[k].is_identity()) m[k] = frames[k].matrix() * m[k];
    }
    return m;
}

struct SimulatedScan {
    PhantomSpec phantom;
    Trajectory trajectory;
    Trajectory moved;
    std::vector<Mat4> motion;
    std::vector<ShortScanView> views;
    std::vector<Volume> volumes;
};

/// Views of the nominal trajectory labeled from the recipe's motion. Cheap:
/// nothing is projected.
inline std::vector<ShortScanView> labeled_views(const ScanRecipe& r, const Trajectory& traj) {
    auto views = select_short_scan_views(traj);
    const auto motion = build_motion(r, traj);
    const auto labels = label_views(views, std::span<const Mat4>(motion), traj);
    for (std::size_t i = 0; i < views.size(); ++i) views[i].label = labels[i];
    return views;
}

/// Phantom -> moved projections -> one short-scan FDK volume per view in
/// `keep` (all views when empty). Reconstruction uses the nominal geometry.
inline SimulatedScan simulate_scan(const ScanRecipe& r, const Preset& preset, const std::vector<int>& keep = {},
                                   unsigned workers = 0) {
    SimulatedScan s;
    s.phantom = build_phantom(r);
    s.trajectory = build_circular_trajectory(preset.geometry);
    s.motion = build_motion(r, s.trajectory);
    s.moved = apply_motion(s.trajectory, std::span<const Mat4>(s.motion));
    s.views = labeled_views(r, s.trajectory);
    const Volume phantom = rasterize(s.phantom, preset.grid, workers);
    ProjectorOptions popt;
    popt.workers = workers;
    const ProjectionStack stack = forward_project(phantom, s.moved, popt);
    ReconOptions ropt;
    ropt.workers = workers;
    for (const auto& v : s.views) {
        const bool wanted = keep.empty() || std::find(keep.begin(), keep.end(), v.view_index) != keep.end();
        s.volumes.push_back(wanted ? fdk_reconstruct(stack, s.trajectory, v, preset.grid, ropt) : Volume{});
    }
    return s;
}

// ---------------------------------------------------------------------------
// Random scan parameters

/// Largest scale (at most `scale`) keeping the phantom inside the usable
/// field of view after the in-plane shift.
inline AugmentSpec fit_augmentation(AugmentSpec a, double phantom_radius, double limit_radius) {
    const double shift = std::hypot(a.translation_mm.x(), a.translation_mm.y());
    a.scale = std::clamp(std::min(a.scale, (limit_radius - shift) / phantom_radius), 0.8, 1.2);
    return a;
}

/// Random motion of the given scenario. Amplitude in [3, 8] with a random
/// sign, duration in [1, 5] s. Move-and-stay and return-to-different
/// windows start after the first view so that it stays motion-free.
inline MotionSpec random_motion(const std::string& scenario, Rng& rng, const Trajectory& traj) {
    MotionSpec m;
    apply_scenario(m, scenario);
    m.amplitude = rng.uniform(3.0, 8.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const double duration = rng.uniform(1.0, 5.0);
    const double scan = traj.geometry.scan_duration;
    double earliest = 0.0;
    if (m.type != MotionType::Trem && m.pattern != MotionPattern::RI) {
        const auto views = select_short_scan_views(traj, 4);
        double last = 0.0;
        for (int k : views.front().frame_indices) last = std::max(last, traj.frames[k].time);
        earliest = last + scan / traj.geometry.n_frames;
    }
    m.t_start = rng.uniform(earliest, scan - duration);
    m.t_end = m.t_start + duration;
    m.tremor_frequency = rng.uniform(3.0, 5.0);
    m.rd_fraction = rng.uniform(0.3, 0.7);
    m.validate(scan);
    return m;
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetConfig {
    int train_volumes = 64;
    int test_scans_per_scenario = 1;
    std::uint64_t seed = 0;
};

struct PlannedScan {
    ScanRecipe recipe;
    std::string split;
    std::vector<ViewLabel> labels;
    std::vector<int> keep;
};

inline std::string volume_id(const PlannedScan& s, int view) { return s.recipe.id + "_v" + std::to_string(view); }

namespace detail {

inline ScanRecipe random_recipe(const std::string& id, PhantomKind kind, bool metal, Rng& rng, const Preset& preset) {
    ScanRecipe r;
    r.id = id;
    r.kind = kind;
    r.metal = metal;
    r.phantom_seed = rng.next();
    const double radius = default_phantom(kind, metal, r.phantom_seed).bounding_radius();
    const double limit = std::min(preset.geometry.fov_radius,
                                  0.5 * preset.grid.dims[0] * preset.grid.spacing.x()) - 2.0;
    r.augmentations.push_back(fit_augmentation(AugmentSpec::random(rng), radius, limit));
    return r;
}

} // namespace detail

/// Training split: motion scans of the small and medium phantoms cycling
/// through the ten scenarios until half the volumes are positive, then
/// static scans to fill the negatives. Test split: the large phantom with
/// metal inserts, every scenario, all four views.
inline std::vector<PlannedScan> plan_dataset(const Preset& preset, const DatasetConfig& cfg) {
    require(cfg.train_volumes >= 2 && cfg.train_volumes % 2 == 0, "train_volumes must be even and >= 2");
    require(cfg.test_scans_per_scenario >= 0, "test_scans_per_scenario must be >= 0");
    const Trajectory traj = build_circular_trajectory(preset.geometry);
    Rng rng(mix_seed(cfg.seed, 0xda7a));
    const auto& scenarios = scenario_names();
    const int half = cfg.train_volumes / 2;

    std::vector<PlannedScan> plan;
    int pos = 0, neg = 0, n = 0;
    for (; pos < half; ++n) {
        require(n < 100 * cfg.train_volumes, "could not collect enough positive training views");
        const PhantomKind kind = n % 2 == 0 ? PhantomKind::Small : PhantomKind::Medium;
        PlannedScan s;
        s.split = "train";
        s.recipe = detail::random_recipe("train_" + std::to_string(n), kind, false, rng, preset);
        s.recipe.motions.push_back(random_motion(scenarios[n % scenarios.size()], rng, traj));
        for (const auto& v : labeled_views(s.recipe, traj)) {
            s.labels.push_back(*v.label);
            int& count = *v.label == ViewLabel::Positive ? pos : neg;
            if (count < half) {
                ++count;
                s.keep.push_back(v.view_index);
            }
        }
        if (!s.keep.empty()) plan.push_back(std::move(s));
    }
    for (; neg < half; ++n) {
        PlannedScan s;
        s.split = "train";
        const PhantomKind kind = n % 2 == 0 ? PhantomKind::Small : PhantomKind::Medium;
        s.recipe = detail::random_recipe("train_" + std::to_string(n), kind, false, rng, preset);
        for (int v = 0; v < 4; ++v) {
            s.labels.push_back(ViewLabel::Negative);
            if (neg < half) {
                ++neg;
                s.keep.push_back(v);
            }
        }
        plan.push_back(std::move(s));
    }
    int t = 0;
    for (int rep = 0; rep < cfg.test_scans_per_scenario; ++rep)
        for (const auto& name : scenarios) {
            PlannedScan s;
            s.split = "test";
            s.recipe = detail::random_recipe("test_" + std::to_string(t++), PhantomKind::Large, true, rng, preset);
            s.recipe.motions.push_back(random_motion(name, rng, traj));
            for (const auto& v : labeled_views(s.recipe, traj)) {
                s.labels.push_back(*v.label);
                s.keep.push_back(v.view_index);
            }
            plan.push_back(std::move(s));
        }
    return plan;
}

inline Json to_json(const ScanRecipe& r) {
    Json aug = Json::array(), mot = Json::array();
    for (const auto& a : r.augmentations) aug.push_back(to_json(a));
    for (const auto& m : r.motions) mot.push_back(to_json(m));
    return {{"id", r.id},
            {"phantom", {{"kind", to_string(r.kind)}, {"metal", r.metal}, {"seed", r.phantom_seed}}},
            {"augmentations", aug},
            {"motion", mot}};
}

using Progress = std::function<void(const std::string&)>;

/// Simulates every planned scan and writes the kept views under
/// `out/volumes/` plus a manifest `out/dataset.json`.
inline Json make_dataset(const Preset& preset, const DatasetConfig& cfg, const fs::path& out, unsigned workers = 0,
                         const Progress& progress = {}) {
    const auto plan = plan_dataset(preset, cfg);
    Json volumes = Json::array(), scans = Json::array();
    for (const auto& s : plan) {
        if (progress) progress("simulating " + s.recipe.id + " (" + s.recipe.scenario() + ")");
        const SimulatedScan sim = simulate_scan(s.recipe, preset, s.keep, workers);
        Json scan = to_json(s.recipe);
        scan["split"] = s.split;
        Json labels = Json::array();
        for (auto l : s.labels) labels.push_back(to_string(l));
        scan["view_labels"] = labels;
        scans.push_back(scan);
        for (int v : s.keep) {
            const std::string id = volume_id(s, v);
            const std::string rel = "volumes/" + id + ".raw";
            write_volume(out / rel, sim.volumes[v]);
            volumes.push_back({{"volume_id", id},
                               {"split", s.split},
                               {"scan", s.recipe.id},
                               {"view", v},
                               {"motion_type", s.recipe.scenario()},
                               {"label", s.labels[v] == ViewLabel::Positive ? 1 : 0},
                               {"payload", rel}});
        }
    }
    Json manifest = {{"preset", preset.name},
                     {"seed", cfg.seed},
                     {"train_volumes", cfg.train_volumes},
                     {"test_scans_per_scenario", cfg.test_scans_per_scenario},
                     {"n_slices", preset.n_slices},
                     {"slice_size", preset.slice_size},
                     {"scans", scans},
                     {"volumes", volumes}};
    write_json(out / "dataset.json", manifest);
    return manifest;
}

struct DatasetVolume {
    std::string volume_id;
    std::string split;
    std::string motion_type;
    int label = 0;
    fs::path payload;
};

inline std::vector<DatasetVolume> dataset_volumes(const fs::path& dir, const std::string& split = {}) {
    const Json manifest = read_json(dir / "dataset.json");
    return json_guard("dataset manifest", [&] {
        std::vector<DatasetVolume> out;
        for (const auto& v : manifest.at("volumes")) {
            DatasetVolume d;
            d.volume_id = v.at("volume_id").get<std::string>();
            d.split = v.at("split").get<std::string>();
            d.motion_type = v.at("motion_type").get<std::string>();
            d.label = v.at("label").get<int>();
            d.payload = dir / v.at("payload").get<std::string>();
            if (split.empty() || d.split == split) out.push_back(std::move(d));
        }
        return out;
    });
}

struct SliceSettings {
    int n_slices = 96;
    int slice_size = 256;
};

inline SliceSettings dataset_slice_settings(const fs::path& dir) {
    const Json manifest = read_json(dir / "dataset.json");
    return json_guard("dataset manifest", [&] {
        return SliceSettings{manifest.at("n_slices").get<int>(), manifest.at("slice_size").get<int>()};
    });
}

/// Trains the logistic scorer on every slice of the training volumes; slices
/// inherit their volume's label.
inline LogisticScorer train_on_dataset(const fs::path& dir, const TrainingConfig& config, unsigned workers = 0,
                                       const Progress& progress = {}) {
    const SliceSettings ss = dataset_slice_settings(dir);
    std::vector<FeatureVector> features;
    std::vector<int> labels;
    for (const auto& d : dataset_volumes(dir, "train")) {
        if (progress) progress("features " + d.volume_id);
        const Volume v = read_volume(d.payload);
        const auto slices = prepare_slices(v, ss.n_slices, ss.slice_size, d.volume_id, workers);
        for (const auto& f : slice_features(slices, workers)) {
            features.push_back(f);
            labels.push_back(d.label);
        }
    }
    require(!features.empty(), "dataset has no training volumes");
    return train_scorer(features, labels, config);
}

inline Json to_json(const VolumeResult& r) {
    return {{"volume_id", r.volume_id},
            {"motion_type", r.motion_type},
            {"label", r.label},
            {"y_pred", r.verdict.y_pred},
            {"y_final", to_string(r.verdict.y_final)},
            {"n_slices", r.verdict.n()},
            {"slice_scores", r.verdict.scores}};
}

inline VolumeResult volume_result_from_json(const Json& j) {
    return json_guard("verdict", [&] {
        VolumeResult r;
        r.volume_id = j.at("volume_id").get<std::string>();
        r.motion_type = j.at("motion_type").get<std::string>();
        r.label = j.at("label").get<int>();
        r.verdict = make_verdict(j.at("slice_scores").get<std::vector<double>>());
        return r;
    });
}

inline Json verdicts_to_json(std::span<const VolumeResult> results) {
    Json arr = Json::array();
    for (const auto& r : results) arr.push_back(to_json(r));
    return {{"volumes", arr}};
}

inline std::vector<VolumeResult> verdicts_from_json(const Json& j) {
    return json_guard("verdicts", [&] {
        std::vector<VolumeResult> out;
        for (const auto& v : j.at("volumes")) out.push_back(volume_result_from_json(v));
        return out;
    });
}

inline std::vector<VolumeResult> detect_dataset(const fs::path& dir, const SliceScorer& scorer,
                                                const std::string& split = "test", unsigned workers = 0,
                                                const Progress& progress = {}) {
    const SliceSettings ss = dataset_slice_settings(dir);
    std::vector<VolumeResult> out;
    for (const auto& d : dataset_volumes(dir, split)) {
        if (progress) progress("scoring " + d.volume_id);
        const Volume v = read_volume(d.payload);
        const auto slices = prepare_slices(v, ss.n_slices, ss.slice_size, d.volume_id, workers);
        out.push_back({d.volume_id, d.motion_type, d.label, score_volume(scorer, slices, workers)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Figures

/// Middle axial slice of every view side by side, each framed green when
/// clean and red when motion-affected.
inline RgbImage view_montage(const std::vector<Volume>& volumes, const std::vector<bool>& affected, int size = 256,
                             int border = 6) {
    require(volumes.size() == affected.size(), "one flag per view is required");
    const int tile = size + 2 * border;
    RgbImage img(tile * static_cast<int>(volumes.size()), tile);
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const Volume& v = volumes[i];
        const Slice s = normalize_slice({axial_slice(v, v.nz() / 2), {}, v.nz() / 2}, size);
        const int x0 = static_cast<int>(i) * tile;
        for (int y = 0; y < tile; ++y)
            for (int x = 0; x < tile; ++x) {
                const bool inner = x >= border && x < border + size && y >= border && y < border + size;
                if (inner) {
                    const auto g = static_cast<std::uint8_t>(std::lround(s.image.at(x - border, y - border) * 255.0));
                    img.set(x0 + x, y, g, g, g);
                } else if (affected[i]) {
                    img.set(x0 + x, y, 220, 30, 30);
                } else {
                    img.set(x0 + x, y, 30, 190, 60);
                }
            }
    }
    return img;
}

/// Step plot of a precision-recall curve on a white square with a 10% margin;
/// recall runs left to right, precision bottom to top.
inline RgbImage pr_plot(const std::vector<PrPoint>& curve, int size = 320) {
    require(size >= 64, "plot size must be at least 64");
    RgbImage img(size, size);
    std::fill(img.rgb.begin(), img.rgb.end(), std::uint8_t{255});
    const int m = size / 10, span = size - 2 * m;
    auto px = [&](double r) { return m + static_cast<int>(std::lround(r * span)); };
    auto py = [&](double p) { return size - 1 - m - static_cast<int>(std::lround(p * span)); };
    for (int i = 0; i <= span; ++i) {
        img.set(m + i, py(0.0), 0, 0, 0);
        img.set(m, py(0.0) - i, 0, 0, 0);
        if (i % (span / 10) == 0)
            for (int t = 1; t <= 3; ++t) {
                img.set(m + i, py(0.0) + t, 0, 0, 0);
                img.set(m - t, py(0.0) - i, 0, 0, 0);
            }
    }
    auto dot = [&](int x, int y) {
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int xx = std::clamp(x + dx, 0, size - 1), yy = std::clamp(y + dy, 0, size - 1);
                img.set(xx, yy, 30, 70, 200);
            }
    };
    for (std::size_t k = 1; k < curve.size(); ++k) {
        const int y = py(curve[k].precision);
        for (int x = px(curve[k - 1].recall); x <= px(curve[k].recall); ++x) dot(x, y);
        const int y0 = py(curve[k - 1].precision);
        for (int yy = std::min(y0, y); yy <= std::max(y0, y); ++yy) dot(px(curve[k - 1].recall), yy);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Scenario pipeline

struct Scenario {
    Preset preset = desk_preset();
    ScanRecipe recipe;
    std::optional<fs::path> scorer;
    fs::path output_dir = "out";
};

/// Relative paths resolve against `base`.
inline Scenario scenario_from_json(const Json& j, const fs::path& base = {}) {
    return json_guard("scenario", [&] {
        Scenario s;
        s.preset = preset_by_name(j.value("preset", std::string("desk")));
        if (j.contains("geometry")) s.preset.geometry = geometry_from_json(j.at("geometry"), s.preset.geometry);
        if (j.contains("grid")) s.preset.grid = grid_from_json(j.at("grid"));
        s.preset.n_slices = j.value("n_slices", s.preset.n_slices);
        s.preset.slice_size = j.value("slice_size", s.preset.slice_size);
        require(s.preset.n_slices >= 1 && s.preset.slice_size >= 8, "n_slices and slice_size must be positive");
        s.recipe.id = j.value("id", std::string("scan"));
        const Json& ph = j.at("phantom");
        s.recipe.kind = parse_phantom_kind(ph.value("kind", std::string("medium")));
        s.recipe.metal = ph.value("metal", false);
        s.recipe.phantom_seed = ph.value("seed", std::uint64_t{0});
        if (j.contains("augmentations"))
            for (const auto& a : j.at("augmentations")) s.recipe.augmentations.push_back(augment_from_json(a));
        const Json& mot = j.value("motion", Json("none"));
        if (!(mot.is_string() && mot.get<std::string>() == "none")) {
            require(mot.is_array(), "motion must be \"none\" or a list of motion specs");
            for (const auto& m : mot) s.recipe.motions.push_back(motion_from_json(m));
        }
        auto resolve = [&](const fs::path& p) { return p.is_absolute() || base.empty() ? p : base / p; };
        if (j.contains("scorer")) s.scorer = resolve(j.at("scorer").get<std::string>());
        s.output_dir = resolve(j.value("output_dir", std::string("out")));
        const Trajectory traj = build_circular_trajectory(s.preset.geometry);
        for (const auto& m : s.recipe.motions) m.validate(traj.geometry.scan_duration);
        build_phantom(s.recipe).validate();
        return s;
    });
}

struct PipelineResult {
    SimulatedScan scan;
    std::vector<VolumeResult> results;
    std::optional<EvalReport> report;
};

/// phantom -> projections -> four short-scan volumes -> slice scores ->
/// verdicts -> report, with every artifact written under the output
/// directory.
inline PipelineResult run_pipeline(const Scenario& sc, unsigned workers = 0, const Progress& progress = {}) {
    const fs::path out = sc.output_dir;
    std::optional<LogisticScorer> scorer;
    if (sc.scorer) scorer = scorer_from_json(read_json(*sc.scorer));

    if (progress) progress("simulating " + sc.recipe.id + " (" + sc.recipe.scenario() + ")");
    PipelineResult res;
    res.scan = simulate_scan(sc.recipe, sc.preset, {}, workers);
    const SimulatedScan& s = res.scan;
    write_json(out / "phantom.json", to_json(s.phantom));
    write_json(out / "trajectory.json", to_json(s.trajectory));
    write_json(out / "moved_trajectory.json", to_json(s.moved));

    std::vector<bool> affected;
    Json views = Json::array();
    for (const auto& v : s.views) {
        const std::string id = sc.recipe.id + "_v" + std::to_string(v.view_index);
        write_volume(out / "volumes" / (id + ".raw"), s.volumes[v.view_index]);
        const int label = *v.label == ViewLabel::Positive ? 1 : 0;
        Json entry = {{"volume_id", id}, {"view", v.view_index}, {"label", label}};
        if (scorer) {
            if (progress) progress("scoring " + id);
            const auto slices = prepare_slices(s.volumes[v.view_index], sc.preset.n_slices, sc.preset.slice_size, id, workers);
            const auto& mid = slices[slices.size() / 2];
            write_png(out / "slices" / (id + ".png"), mid.image);
            res.results.push_back({id, sc.recipe.scenario(), label, score_volume(*scorer, slices, workers)});
            const VolumeVerdict& vv = res.results.back().verdict;
            affected.push_back(vv.y_final == Verdict::Motion);
            entry["y_pred"] = vv.y_pred;
            entry["verdict"] = to_string(vv.y_final);
        } else {
            affected.push_back(label == 1);
        }
        entry["color"] = affected.back() ? "red" : "green";
        views.push_back(entry);
    }
    write_png(out / "views.png", view_montage(s.volumes, affected, sc.preset.slice_size));
    write_json(out / "views.json", {{"scenario", sc.recipe.scenario()}, {"views", views}});
    if (scorer) {
        write_json(out / "verdicts.json", verdicts_to_json(res.results));
        res.report = evaluate_run(res.results);
        write_json(out / "report.json", report_to_json(*res.report));
        write_text(out / "report.txt", format_report(*res.report));
    }
    return res;
}

} // namespace cbctmotion

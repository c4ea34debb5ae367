// Acceptance gate. Each criterion prints one line:
//   criterion <n> <PASS|FAIL> <name>: <measured> (<limit>) [<seconds>s]
// and the process exits nonzero when any selected criterion fails.

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <cbctmotion/pipeline.hpp>

using namespace cbctmotion;

namespace {

struct Outcome {
    bool pass = false;
    std::string measured;
    std::string limit;
};

std::string fmt(double v, int digits = 6) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

class Stopwatch {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Outcome with_runtime(Outcome o, const Stopwatch& w, double limit_s) {
    const double t = w.seconds();
    o.pass = o.pass && t < limit_s;
    o.measured += ", " + fmt(t, 3) + " s";
    o.limit += ", < " + fmt(limit_s) + " s";
    return o;
}

Outcome parker_redundancy() {
    const Stopwatch w;
    double worst = 0.0;
    for (const ScanGeometry& g : {desk_preset().geometry, full_preset().geometry}) {
        const double delta = fan_angle(g);
        for (int i = 0; i < 200; ++i) {
            const double beta = (kPi + 2.0 * delta) * i / 199.0;
            for (int j = 0; j < 200; ++j) {
                const double gamma = -delta + 2.0 * delta * j / 199.0;
                const double sum = parker_weight(beta, gamma, delta) +
                                   parker_weight(beta + kPi - 2.0 * gamma, -gamma, delta);
                worst = std::max(worst, std::abs(sum - 1.0));
            }
        }
    }
    return with_runtime({worst < 1e-9, "max |w + w' - 1| = " + fmt(worst), "< 1e-9"}, w, 1.0);
}

// Desk detector-to-voxel ratio at a quarter of the resolution.
Outcome point_response() {
    const Stopwatch w;
    ScanGeometry g = desk_preset().geometry;
    g.det_rows = g.det_cols = 64;
    g.pixel_pitch *= 4.0;
    g.n_frames = 36;
    const Trajectory traj = build_circular_trajectory(g);
    const Grid grid = Grid::centered({32, 32, 32}, 3.2);
    Rng rng(36);
    double worst = 0.0;
    int misses = 0;
    for (int n = 0; n < 50; ++n) {
        int i, j, k;
        do {
            i = rng.uniform_int(2, 29);
            j = rng.uniform_int(2, 29);
            k = rng.uniform_int(2, 29);
        } while (grid.voxel_center(i, j, k).head<2>().norm() > 0.85 * g.fov_radius);
        Volume v(grid);
        v.at(i, j, k) = 1.0f;
        ProjectorOptions opt;
        opt.workers = 0;
        const ProjectionStack s = forward_project(v, traj, opt);
        for (int f = 0; f < s.frames; ++f) {
            int br = 0, bc = 0;
            for (int r = 0; r < s.rows; ++r)
                for (int c = 0; c < s.cols; ++c)
                    if (s.at(f, r, c) > s.at(f, br, bc)) {
                        br = r;
                        bc = c;
                    }
            const Vec2 p = project_point(traj.frames[f], grid.voxel_center(i, j, k));
            const double d = std::max(std::abs(bc - p.x()), std::abs(br - p.y()));
            worst = std::max(worst, d);
            if (d > 1.0) ++misses;
        }
    }
    return with_runtime({misses == 0, "worst peak offset " + fmt(worst, 4) + " px, " + std::to_string(misses) +
                                          " of 1800 beyond 1 px",
                         "<= 1 px"},
                        w, 60.0);
}

Outcome short_scan_sufficiency() {
    const Stopwatch w;
    const Preset p = desk_preset();
    const Trajectory traj = build_circular_trajectory(p.geometry);
    const Volume truth = rasterize(default_phantom(PhantomKind::Medium, false, 0), p.grid);
    const ProjectionStack stack = forward_project(truth, traj);
    const Volume full = fdk_reconstruct(stack, traj, std::nullopt, p.grid);
    const auto roi = central_roi(p.grid, p.geometry.fov_radius);
    double worst = 0.0;
    std::string per_view;
    for (const auto& view : select_short_scan_views(traj)) {
        const double e = nrmse(fdk_reconstruct(stack, traj, view, p.grid), full, roi);
        worst = std::max(worst, e);
        per_view += (per_view.empty() ? "" : " ") + fmt(100.0 * e, 3) + "%";
    }
    return with_runtime({worst < 0.05, "NRMSE per view " + per_view, "< 5%"}, w, 600.0);
}

// Band-limited ramp kernel sampled at spacing tau.
double closed_form_ramp(int n, double tau) {
    if (n == 0) return 1.0 / (4.0 * tau * tau);
    if (n % 2 == 0) return 0.0;
    return -1.0 / (static_cast<double>(n) * n * kPi * kPi * tau * tau);
}

Outcome ramp_impulse() {
    const Stopwatch w;
    double worst = 0.0;
    for (const ScanGeometry& g : {desk_preset().geometry, full_preset().geometry}) {
        const int n = g.det_cols;
        const RampFilter f(n, g.pixel_pitch);
        std::vector<double> in(n), out(n);
        for (int at : {0, n / 3, n / 2, n - 1}) {
            std::fill(in.begin(), in.end(), 0.0);
            in[at] = 1.0;
            f.apply(in.data(), out.data());
            for (int m = 0; m < n; ++m) worst = std::max(worst, std::abs(out[m] - closed_form_ramp(m - at, g.pixel_pitch)));
        }
    }
    return with_runtime({worst < 1e-6, "max abs error " + fmt(worst), "< 1e-6"}, w, 1.0);
}

bool same_bits(const ProjectionMatrix& a, const ProjectionMatrix& b) {
    return std::memcmp(a.data(), b.data(), sizeof(double) * 12) == 0;
}

Outcome motion_confinement() {
    const Stopwatch w;
    const Trajectory traj = build_circular_trajectory(desk_preset().geometry);
    int zero_bad = 0, confined_bad = 0, checked = 0;
    for (const auto& name : scenario_names()) {
        MotionSpec m;
        apply_scenario(m, name);
        m.amplitude = 0.0;
        m.allow_override = true;
        const auto frames = sample_motion(m, traj);
        const Trajectory moved = apply_motion(traj, std::span<const RigidMotionFrame>(frames));
        for (std::size_t k = 0; k < traj.frames.size(); ++k)
            if (!same_bits(moved.frames[k].P, traj.frames[k].P)) ++zero_bad;
    }
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        MotionSpec m;
        apply_scenario(m, scenario_names()[trial % 10]);
        m.amplitude = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(3.0, 8.0);
        const double d = rng.uniform(1.0, 5.0);
        m.t_start = rng.uniform(0.0, traj.geometry.scan_duration - d);
        m.t_end = m.t_start + d;
        const auto frames = sample_motion(m, traj);
        const Trajectory moved = apply_motion(traj, std::span<const RigidMotionFrame>(frames));
        const bool returns = m.type == MotionType::Trem || m.pattern == MotionPattern::RI;
        for (const auto& f : traj.frames) {
            const bool before = f.time < m.t_start - m.transition_time;
            const bool after = f.time > m.t_end + m.transition_time;
            if (before || (after && returns)) {
                ++checked;
                if (!same_bits(moved.frames[f.index].P, f.P)) ++confined_bad;
            }
        }
    }
    return with_runtime({zero_bad == 0 && confined_bad == 0 && checked > 0,
                         std::to_string(zero_bad) + " zero-amplitude and " + std::to_string(confined_bad) + " of " +
                             std::to_string(checked) + " out-of-window matrices differ",
                         "0 differing bits"},
                        w, 60.0);
}

Outcome clean_view_sweep() {
    const Stopwatch w;
    const Trajectory traj = build_circular_trajectory(desk_preset().geometry);
    const auto views = select_short_scan_views(traj);
    const double T = traj.geometry.scan_duration;
    std::map<std::string, std::pair<int, int>> tally; // scenario -> (cases, without a clean view)
    std::map<std::string, double> last_bad_start;
    for (const auto& name : scenario_names()) {
        MotionSpec m;
        apply_scenario(m, name);
        if (m.type != MotionType::Trem && m.pattern == MotionPattern::SF) continue;
        for (double a : {3.0, -8.0})
        for (int d10 = 10; d10 <= 50; ++d10)
            for (int s10 = 0; s10 + d10 <= static_cast<int>(std::lround(10 * T)); ++s10) {
                m.amplitude = a;
                m.t_start = s10 / 10.0;
                m.t_end = (s10 + d10) / 10.0;
                const auto labels = label_views(views, sample_motion(m, traj), traj);
                auto& [cases, bad] = tally[name];
                ++cases;
                if (std::count(labels.begin(), labels.end(), ViewLabel::Negative) == 0) {
                    ++bad;
                    last_bad_start[name] = std::max(last_bad_start[name], m.t_start);
                }
            }
    }
    int total = 0, bad_total = 0;
    std::string detail;
    for (const auto& [name, t] : tally) {
        total += t.first;
        bad_total += t.second;
        if (t.second > 0)
            detail += " " + name + ":" + std::to_string(t.second) + "/" + std::to_string(t.first) +
                      " (starts up to " + fmt(last_bad_start[name], 3) + " s)";
    }
    return with_runtime({bad_total == 0,
                         std::to_string(bad_total) + " of " + std::to_string(total) + " cases without a clean view" +
                             (detail.empty() ? std::string() : ";" + detail),
                         "0 cases"},
                        w, 60.0);
}

Outcome volume_rule() {
    std::vector<double> s(195, 0.8);
    s.insert(s.end(), 105, 0.4);
    const double avg = volume_average(s);
    const bool example = avg == 0.66 && make_verdict(s).y_final == Verdict::Motion;
    const bool boundary = classify_volume(0.5) == Verdict::Motion &&
                          make_verdict({0.25, 0.75}).y_final == Verdict::Motion &&
                          make_verdict({0.5, 0.5, 0.5}).y_final == Verdict::Motion &&
                          classify_volume(std::nextafter(0.5, 0.0)) == Verdict::NoMotion;
    return {example && boundary,
            "average " + fmt(avg, 17) + " -> " + to_string(make_verdict(s).y_final) + ", boundary " +
                (boundary ? "ok" : "wrong"),
            "0.66 -> motion, 0.5 -> motion"};
}

double exhaustive_ap(const std::vector<LabeledScore>& v) {
    std::set<double, std::greater<>> thresholds;
    int positives = 0;
    for (const auto& it : v) {
        thresholds.insert(it.score);
        positives += it.label;
    }
    double ap = 0.0, prev = 0.0;
    for (double t : thresholds) {
        int tp = 0, fp = 0;
        for (const auto& it : v)
            if (it.score >= t) (it.label ? tp : fp) += 1;
        const double recall = static_cast<double>(tp) / positives;
        ap += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    return ap;
}

Outcome auc_oracle() {
    const Stopwatch w;
    Rng rng(8);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(2, 12);
        std::vector<LabeledScore> v;
        for (int i = 0; i < n; ++i) v.push_back({rng.uniform_int(0, 5) / 5.0, rng.uniform_int(0, 1), "", ""});
        const int ones = static_cast<int>(std::count_if(v.begin(), v.end(), [](const auto& x) { return x.label == 1; }));
        if (ones == 0 || ones == n) v[0].label = 1 - v[0].label;
        worst = std::max(worst, std::abs(auc_pr(v) - exhaustive_ap(v)));
    }
    return with_runtime({worst < 1e-9, "max |auc_pr - oracle| = " + fmt(worst), "< 1e-9"}, w, 5.0);
}

constexpr std::uint64_t kE2ESeed = 2024;

struct E2E {
    EvalReport report;
    double seconds = 0.0;
};

E2E end_to_end(const fs::path& dir) {
    const Stopwatch w;
    const Preset p = desk_preset();
    DatasetConfig cfg;
    cfg.seed = kE2ESeed;
    auto progress = [](const std::string& m) { std::fprintf(stderr, "  %s\n", m.c_str()); };
    make_dataset(p, cfg, dir / "dataset", 0, progress);
    const LogisticScorer scorer = train_on_dataset(dir / "dataset", TrainingConfig{}, 0, progress);
    write_json(dir / "scorer.json", to_json(scorer));
    const auto results = detect_dataset(dir / "dataset", scorer, "test", 0, progress);
    write_json(dir / "verdicts.json", verdicts_to_json(results));
    E2E out;
    out.report = evaluate_run(results);
    write_json(dir / "report.json", report_to_json(out.report));
    write_text(dir / "report.txt", format_report(out.report));
    out.seconds = w.seconds();
    return out;
}

Outcome end_to_end_sanity(const fs::path& workdir) {
    const E2E r = end_to_end(workdir / "run1");
    std::cout << format_report(r.report);
    const double auc = r.report.average.volume_auc.value_or(0.0);
    const double spec = r.report.negative_specificity();
    const bool ok = auc >= 0.85 && spec >= 0.8 && r.seconds < 45 * 60.0;
    return {ok,
            "Average volume AUC-PR " + fmt(auc, 4) + ", clean-volume specificity " + fmt(spec, 4) + " (" +
                std::to_string(r.report.negatives_classified_negative) + "/" + std::to_string(r.report.negatives) +
                "), " + fmt(r.seconds, 4) + " s",
            ">= 0.85, >= 0.8, < 2700 s"};
}

Outcome determinism(const fs::path& workdir) {
    if (!fs::exists(workdir / "run1" / "verdicts.json")) end_to_end(workdir / "run1");
    fs::remove_all(workdir / "run2");
    end_to_end(workdir / "run2");
    const std::string a = read_text(workdir / "run1" / "verdicts.json");
    const std::string b = read_text(workdir / "run2" / "verdicts.json");
    const std::string sa = read_text(workdir / "run1" / "scorer.json");
    const std::string sb = read_text(workdir / "run2" / "scorer.json");
    return {a == b && sa == sb,
            "verdicts " + std::string(a == b ? "identical" : "differ") + " (" + std::to_string(a.size()) +
                " bytes), scorer " + (sa == sb ? "identical" : "differs"),
            "byte-identical"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> selected;
    std::string workdir = "acceptance_e2e";
    app.add_option("--criterion", selected, "Criteria to run (default 1-8)")->check(CLI::Range(1, 10));
    app.add_option("--workdir", workdir, "Scratch directory for criteria 9 and 10");
    CLI11_PARSE(app, argc, argv);
    if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8};

    const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
        {1, {"parker redundancy", parker_redundancy}},
        {2, {"point response", point_response}},
        {3, {"short-scan sufficiency", short_scan_sufficiency}},
        {4, {"ramp impulse", ramp_impulse}},
        {5, {"motion confinement", motion_confinement}},
        {6, {"clean-view sweep", clean_view_sweep}},
        {7, {"volume averaging rule", volume_rule}},
        {8, {"auc-pr oracle", auc_oracle}},
        {9, {"end-to-end sanity", [&] { return end_to_end_sanity(workdir); }}},
        {10, {"determinism", [&] { return determinism(workdir); }}},
    };

    bool all = true;
    for (int n : selected) {
        const auto& [name, fn] = criteria.at(n);
        const Stopwatch w;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what(), "no error"};
        }
        all = all && o.pass;
        std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.measured
                  << " (" << o.limit << ") [" << fmt(w.seconds(), 3) << "s]" << std::endl;
    }
    return all ? 0 : 1;
}

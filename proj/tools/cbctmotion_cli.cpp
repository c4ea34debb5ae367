#include <iostream>

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif

#include <cbctmotion/pipeline.hpp>

using namespace cbctmotion;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Globals {
    unsigned workers = 0;
    bool quiet = false;
};

Progress progress_printer(const Globals& g) {
    if (g.quiet) return {};
    return [](const std::string& msg) { std::cerr << msg << std::endl; };
}

Preset load_preset(const std::string& name, const std::string& geometry_file, const std::string& grid_file) {
    Preset p = preset_by_name(name);
    if (!geometry_file.empty()) p.geometry = geometry_from_json(read_json(geometry_file), p.geometry);
    if (!grid_file.empty()) p.grid = grid_from_json(read_json(grid_file));
    return p;
}

/// A motion file holds one spec, a list of specs, or a scenario document
/// with a "motion" entry.
std::vector<MotionSpec> load_motions(const fs::path& path) {
    const Json j = read_json(path);
    return json_guard("motion file", [&] {
        const Json& m = j.is_object() && j.contains("motion") ? j.at("motion") : j;
        std::vector<MotionSpec> out;
        if (m.is_string()) {
            require(m.get<std::string>() == "none", "motion must be \"none\", a spec or a list of specs");
        } else if (m.is_array()) {
            for (const auto& x : m) out.push_back(motion_from_json(x));
        } else {
            out.push_back(motion_from_json(m));
        }
        return out;
    });
}

Json views_json(const std::vector<ShortScanView>& views) {
    Json arr = Json::array();
    for (const auto& v : views) {
        Json e = {{"view", v.view_index},
                  {"beta_start_deg", rad_to_deg(v.beta_start)},
                  {"span_deg", rad_to_deg(v.span)},
                  {"frames", v.frame_indices.size()}};
        if (v.label) e["label"] = to_string(*v.label);
        arr.push_back(e);
    }
    return arr;
}

void print_verdict(const VolumeResult& r) {
    std::cout << r.volume_id << "  y_pred " << r.verdict.y_pred << "  " << to_string(r.verdict.y_final) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cone-beam CT motion simulation and short-scan motion detection"};
    app.require_subcommand(1);
    Globals g;
    g.workers = default_workers();
    app.add_option("--workers", g.workers, "Worker threads for parallel kernels (CBCTMOTION_WORKERS sets the default)")
        ->check(CLI::PositiveNumber);
    app.add_flag("-q,--quiet", g.quiet, "Suppress progress messages");

    // phantom
    auto* phantom = app.add_subcommand("phantom", "Write a default phantom spec, optionally rasterized");
    std::string ph_kind = "medium", ph_out, ph_volume, ph_preset = "desk", ph_grid;
    std::uint64_t ph_seed = 0;
    bool ph_metal = false, ph_augment = false;
    phantom->add_option("--kind", ph_kind, "small, medium or large")->capture_default_str();
    phantom->add_option("--seed", ph_seed, "Phantom seed")->capture_default_str();
    phantom->add_flag("--metal", ph_metal, "Add 2-4 metal inserts");
    phantom->add_flag("--augment", ph_augment, "Apply a random augmentation drawn from the seed");
    phantom->add_option("-o,--out", ph_out, "Phantom spec (JSON)")->required();
    phantom->add_option("--volume", ph_volume, "Also rasterize to this volume payload (.raw)");
    phantom->add_option("--preset", ph_preset, "Preset whose grid is used with --volume")->capture_default_str();
    phantom->add_option("--grid", ph_grid, "Grid override (JSON with dims, spacing, origin)");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Forward-project a phantom along a trajectory");
    std::string sim_phantom, sim_preset = "desk", sim_geometry, sim_grid, sim_traj, sim_out, sim_traj_out;
    double sim_photons = 0.0;
    std::uint64_t sim_noise_seed = 0;
    simulate->add_option("--phantom", sim_phantom, "Phantom spec (JSON)")->required();
    simulate->add_option("--preset", sim_preset, "desk or full")->capture_default_str();
    simulate->add_option("--geometry", sim_geometry, "Geometry overrides (JSON)");
    simulate->add_option("--grid", sim_grid, "Grid override for rasterizing (JSON)");
    simulate->add_option("--trajectory", sim_traj, "Trajectory to use instead of the nominal circle (JSON)");
    simulate->add_option("-o,--out", sim_out, "Projection stack payload (.raw)")->required();
    simulate->add_option("--trajectory-out", sim_traj_out, "Write the trajectory used (JSON)");
    simulate->add_option("--photons", sim_photons, "Incident photons per ray for Poisson noise (0 = noiseless)")
        ->check(CLI::NonNegativeNumber);
    simulate->add_option("--noise-seed", sim_noise_seed, "Noise seed");

    // inject-motion
    auto* inject = app.add_subcommand("inject-motion", "Apply rigid motion to a trajectory and label its views");
    std::string inj_traj, inj_motion, inj_out, inj_labels, inj_frames;
    inject->add_option("--trajectory", inj_traj, "Nominal trajectory (JSON)")->required();
    inject->add_option("--motion", inj_motion, "Motion spec, list of specs, or scenario (JSON)")->required();
    inject->add_option("-o,--out", inj_out, "Moved trajectory (JSON)")->required();
    inject->add_option("--labels", inj_labels, "Write view labels (JSON)");
    inject->add_option("--frames", inj_frames, "Write the per-frame object pose matrices (JSON)");

    // reconstruct
    auto* recon = app.add_subcommand("reconstruct", "FDK reconstruction of one or all short-scan views");
    std::string rec_proj, rec_traj, rec_preset = "desk", rec_grid, rec_view = "all", rec_out;
    recon->add_option("--projections", rec_proj, "Projection stack payload (.raw)")->required();
    recon->add_option("--trajectory", rec_traj, "Nominal trajectory (JSON)")->required();
    recon->add_option("--preset", rec_preset, "Preset whose grid is reconstructed")->capture_default_str();
    recon->add_option("--grid", rec_grid, "Grid override (JSON)");
    recon->add_option("--view", rec_view, "0-3, all (four short scans) or full (360 degrees)")->capture_default_str();
    recon->add_option("-o,--out", rec_out, "Volume payload (.raw); with --view all, files <stem>_v<i>.raw")
        ->required();

    // make-dataset
    auto* dataset = app.add_subcommand("make-dataset", "Generate the training and test volumes");
    std::string ds_preset = "desk", ds_out;
    DatasetConfig ds_cfg;
    dataset->add_option("--preset", ds_preset, "desk or full")->capture_default_str();
    dataset->add_option("--seed", ds_cfg.seed, "Dataset seed")->capture_default_str();
    dataset->add_option("--train-volumes", ds_cfg.train_volumes, "Training volumes (half positive)")
        ->capture_default_str();
    dataset->add_option("--test-scans-per-scenario", ds_cfg.test_scans_per_scenario, "Test scans per motion type")
        ->capture_default_str();
    dataset->add_option("-o,--out", ds_out, "Dataset directory")->required();

    // train
    auto* train = app.add_subcommand("train", "Train the logistic slice scorer on a dataset");
    std::string tr_dataset, tr_out;
    TrainingConfig tr_cfg;
    train->add_option("--dataset", tr_dataset, "Dataset directory")->required();
    train->add_option("-o,--out", tr_out, "Scorer (JSON)")->required();
    train->add_option("--lr", tr_cfg.learning_rate, "Learning rate")->capture_default_str();
    train->add_option("--momentum", tr_cfg.momentum, "Momentum")->capture_default_str();
    train->add_option("--epochs", tr_cfg.epochs, "Epochs")->capture_default_str();
    train->add_option("--batch-size", tr_cfg.batch_size, "Mini-batch size (0 = full batch)")->capture_default_str();
    train->add_option("--seed", tr_cfg.seed, "Shuffle seed")->capture_default_str();

    // detect
    auto* detect = app.add_subcommand("detect", "Score volumes and classify them");
    std::string det_scorer, det_dataset, det_split = "test", det_volume, det_out, det_preset = "desk";
    detect->add_option("--scorer", det_scorer, "Scorer (JSON)")->required();
    auto* det_ds_opt = detect->add_option("--dataset", det_dataset, "Dataset directory");
    detect->add_option("--split", det_split, "Dataset split to score")->capture_default_str();
    auto* det_vol_opt = detect->add_option("--volume", det_volume, "Single volume payload (.raw)");
    detect->add_option("--preset", det_preset, "Slice settings for --volume")->capture_default_str();
    detect->add_option("-o,--out", det_out, "Verdicts (JSON)")->required();
    det_ds_opt->excludes(det_vol_opt);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "AUC-PR per motion type from verdicts");
    std::string ev_verdicts, ev_out, ev_text;
    evaluate->add_option("--verdicts", ev_verdicts, "Verdicts (JSON)")->required();
    evaluate->add_option("-o,--out", ev_out, "Report (JSON)")->required();
    evaluate->add_option("--text", ev_text, "Also write the text table here");

    // report
    auto* report = app.add_subcommand("report", "Render tables and precision-recall plots from verdicts");
    std::string rep_verdicts, rep_dir;
    report->add_option("--verdicts", rep_verdicts, "Verdicts (JSON)")->required();
    report->add_option("-o,--out-dir", rep_dir, "Output directory")->required();

    // run
    auto* run = app.add_subcommand("run", "Run a scenario end to end");
    std::string run_scenario, run_out;
    run->add_option("--scenario", run_scenario, "Scenario (JSON)")->required();
    run->add_option("-o,--output-dir", run_out, "Override the scenario's output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        const Progress progress = progress_printer(g);
        const unsigned workers = g.workers;

        if (phantom->parsed()) {
            PhantomSpec spec = default_phantom(parse_phantom_kind(ph_kind), ph_metal, ph_seed);
            if (ph_augment) {
                const Preset p = load_preset(ph_preset, {}, ph_grid);
                Rng rng(mix_seed(ph_seed, 0xa06));
                const double limit =
                    std::min(p.geometry.fov_radius, 0.5 * p.grid.dims[0] * p.grid.spacing.x()) - 2.0;
                spec = augment(spec, fit_augmentation(AugmentSpec::random(rng), spec.bounding_radius(), limit));
            }
            if (!ph_volume.empty())
                require(fs::absolute(sidecar_path(ph_volume)) != fs::absolute(ph_out),
                        "--volume sidecar would overwrite the phantom spec; choose another name");
            write_json(ph_out, to_json(spec));
            if (!ph_volume.empty()) write_volume(ph_volume, rasterize(spec, load_preset(ph_preset, {}, ph_grid).grid, workers));
        } else if (simulate->parsed()) {
            const Preset p = load_preset(sim_preset, sim_geometry, sim_grid);
            const PhantomSpec spec = phantom_from_json(read_json(sim_phantom));
            const Trajectory traj =
                sim_traj.empty() ? build_circular_trajectory(p.geometry) : trajectory_from_json(read_json(sim_traj));
            ProjectorOptions opt;
            opt.workers = workers;
            if (sim_photons > 0.0) opt.noise = NoiseModel{sim_photons, sim_noise_seed};
            if (progress) progress("rasterizing");
            const Volume vol = rasterize(spec, p.grid, workers);
            if (progress) progress("projecting " + std::to_string(traj.frames.size()) + " frames");
            write_stack(sim_out, forward_project(vol, traj, opt));
            if (!sim_traj_out.empty()) write_json(sim_traj_out, to_json(traj));
        } else if (inject->parsed()) {
            const Trajectory traj = trajectory_from_json(read_json(inj_traj));
            ScanRecipe r;
            r.motions = load_motions(inj_motion);
            for (const auto& m : r.motions) m.validate(traj.geometry.scan_duration);
            const auto motion = build_motion(r, traj);
            write_json(inj_out, to_json(apply_motion(traj, std::span<const Mat4>(motion))));
            if (!inj_labels.empty())
                write_json(inj_labels, {{"scenario", r.scenario()}, {"views", views_json(labeled_views(r, traj))}});
            if (!inj_frames.empty()) {
                Json arr = Json::array();
                for (const auto& m : motion) {
                    Json rows = Json::array();
                    for (int i = 0; i < 4; ++i) rows.push_back({m(i, 0), m(i, 1), m(i, 2), m(i, 3)});
                    arr.push_back(rows);
                }
                write_json(inj_frames, arr);
            }
        } else if (recon->parsed()) {
            const Preset p = load_preset(rec_preset, {}, rec_grid);
            const Trajectory traj = trajectory_from_json(read_json(rec_traj));
            const ProjectionStack stack = read_stack(rec_proj);
            ReconOptions opt;
            opt.workers = workers;
            const auto views = select_short_scan_views(traj);
            if (rec_view == "full") {
                write_volume(rec_out, fdk_reconstruct(stack, traj, std::nullopt, p.grid, opt));
            } else if (rec_view == "all") {
                const fs::path out(rec_out);
                for (const auto& v : views) {
                    if (progress) progress("reconstructing view " + std::to_string(v.view_index));
                    const fs::path file =
                        out.parent_path() / (out.stem().string() + "_v" + std::to_string(v.view_index) + ".raw");
                    write_volume(file, fdk_reconstruct(stack, traj, v, p.grid, opt));
                }
            } else {
                int idx = -1;
                try {
                    idx = std::stoi(rec_view);
                } catch (const std::exception&) {
                }
                require(idx >= 0 && idx < static_cast<int>(views.size()), "--view must be 0-3, all or full");
                write_volume(rec_out, fdk_reconstruct(stack, traj, views[idx], p.grid, opt));
            }
        } else if (dataset->parsed()) {
            const Json m = make_dataset(preset_by_name(ds_preset), ds_cfg, ds_out, workers, progress);
            if (!g.quiet) std::cout << m.at("volumes").size() << " volumes written to " << ds_out << "\n";
        } else if (train->parsed()) {
            const LogisticScorer s = train_on_dataset(tr_dataset, tr_cfg, workers, progress);
            write_json(tr_out, to_json(s));
            if (!g.quiet)
                std::cout << "loss " << s.loss_trace.front() << " -> " << s.loss_trace.back() << " after "
                          << tr_cfg.epochs << " epochs\n";
        } else if (detect->parsed()) {
            const LogisticScorer s = scorer_from_json(read_json(det_scorer));
            std::vector<VolumeResult> results;
            if (!det_dataset.empty()) {
                results = detect_dataset(det_dataset, s, det_split, workers, progress);
            } else {
                require(!det_volume.empty(), "detect needs --dataset or --volume");
                const Preset p = preset_by_name(det_preset);
                const Volume v = read_volume(det_volume);
                const std::string id = fs::path(det_volume).stem().string();
                const auto slices = prepare_slices(v, p.n_slices, p.slice_size, id, workers);
                results.push_back({id, "unknown", 0, score_volume(s, slices, workers)});
            }
            if (!det_dataset.empty()) {
                write_json(det_out, verdicts_to_json(results));
            } else {
                Json j = to_json(results.front());
                j.erase("label");
                j.erase("motion_type");
                write_json(det_out, j);
            }
            if (!g.quiet)
                for (const auto& r : results) print_verdict(r);
        } else if (evaluate->parsed()) {
            const EvalReport rep = evaluate_run(verdicts_from_json(read_json(ev_verdicts)));
            write_json(ev_out, report_to_json(rep));
            if (!ev_text.empty()) write_text(ev_text, format_report(rep));
            if (!g.quiet) std::cout << format_report(rep);
        } else if (report->parsed()) {
            const auto results = verdicts_from_json(read_json(rep_verdicts));
            const EvalReport rep = evaluate_run(results);
            const fs::path dir(rep_dir);
            write_text(dir / "report.txt", format_report(rep));
            write_json(dir / "report.json", report_to_json(rep));
            std::vector<LabeledScore> vols, slices;
            for (const auto& r : results) {
                vols.push_back({r.verdict.y_pred, r.label, r.volume_id, r.motion_type});
                for (double sc : r.verdict.scores) slices.push_back({sc, r.label, r.volume_id, r.motion_type});
            }
            if (rep.pooled_volume_auc) write_png(dir / "pr_volume.png", pr_plot(pr_curve(vols)));
            if (rep.pooled_slice_auc) write_png(dir / "pr_slice.png", pr_plot(pr_curve(slices)));
            if (!g.quiet) std::cout << format_report(rep);
        } else if (run->parsed()) {
            const fs::path path(run_scenario);
            Scenario sc = scenario_from_json(read_json(path), path.parent_path());
            if (!run_out.empty()) sc.output_dir = run_out;
            const PipelineResult res = run_pipeline(sc, workers, progress);
            if (!g.quiet) {
                for (const auto& v : res.scan.views)
                    std::cout << "view " << v.view_index << ": " << to_string(*v.label) << "\n";
                for (const auto& r : res.results) print_verdict(r);
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

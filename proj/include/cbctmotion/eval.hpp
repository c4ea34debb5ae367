#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "detector.hpp"
#include "motion.hpp"

namespace cbctmotion {

struct LabeledScore {
    double score = 0.0;
    int label = 0;
    std::string unit_id;
    std::string motion_type;
};

struct PrPoint {
    double recall = 0.0;
    double precision = 1.0;
};

/// Precision-recall points, one per distinct score threshold (descending),
/// preceded by the (0, 1) anchor. Tied scores enter together.
inline std::vector<PrPoint> pr_curve(std::span<const LabeledScore> items) {
    std::size_t positives = 0;
    for (const auto& it : items) {
        require(it.label == 0 || it.label == 1, "labels must be 0 or 1");
        require(std::isfinite(it.score), "scores must be finite");
        positives += it.label;
    }
    require(positives > 0 && positives < items.size(), "precision-recall needs both classes");

    std::vector<std::pair<double, int>> sorted;
    sorted.reserve(items.size());
    for (const auto& it : items) sorted.emplace_back(it.score, it.label);
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    std::vector<PrPoint> curve{{0.0, 1.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j].first == sorted[i].first) {
            (sorted[j].second ? tp : fp) += 1;
            ++j;
        }
        curve.push_back({static_cast<double>(tp) / positives, static_cast<double>(tp) / (tp + fp)});
        i = j;
    }
    return curve;
}

/// Average precision: sum over thresholds of (R_k - R_{k-1}) P_k.
inline double auc_pr(std::span<const LabeledScore> items) {
    const auto curve = pr_curve(items);
    double ap = 0.0;
    for (std::size_t k = 1; k < curve.size(); ++k)
        ap += (curve[k].recall - curve[k - 1].recall) * curve[k].precision;
    return ap;
}

// ---------------------------------------------------------------------------
// Run evaluation

/// One classified volume with its ground truth.
struct VolumeResult {
    std::string volume_id;
    std::string motion_type;
    int label = 0;
    VolumeVerdict verdict;
};

struct EvalRow {
    std::string motion_type;
    std::optional<double> slice_auc;
    std::optional<double> volume_auc;
    int volumes = 0;
    int positives = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    EvalRow average;
    std::optional<double> pooled_slice_auc;
    std::optional<double> pooled_volume_auc;
    int negatives = 0;
    int negatives_classified_negative = 0;
    int correct = 0;
    int total = 0;

    double negative_specificity() const {
        return negatives == 0 ? 0.0 : static_cast<double>(negatives_classified_negative) / negatives;
    }
};

namespace detail {

inline std::optional<double> auc_if_defined(std::span<const LabeledScore> items) {
    std::size_t pos = 0;
    for (const auto& it : items) pos += it.label;
    if (pos == 0 || pos == items.size()) return std::nullopt;
    return auc_pr(items);
}

/// Canonical scenario order first, then anything else alphabetically.
inline int motion_type_rank(const std::string& t) {
    const auto& names = scenario_names();
    const auto it = std::find(names.begin(), names.end(), t);
    return it == names.end() ? static_cast<int>(names.size()) : static_cast<int>(it - names.begin());
}

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
    double s = 0.0;
    int n = 0;
    for (const auto& x : v)
        if (x) {
            s += *x;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / n;
}

} // namespace detail

/// Slice- and volume-level AUC-PR per motion type plus their arithmetic mean.
/// Slices inherit their volume's label. Types whose volumes all share one
/// label have no AUC-PR and are left out of the average.
inline EvalReport evaluate_run(std::span<const VolumeResult> results) {
    require(!results.empty(), "nothing to evaluate");
    std::map<std::string, std::vector<const VolumeResult*>> by_type;
    for (const auto& r : results) {
        require(r.label == 0 || r.label == 1, "labels must be 0 or 1");
        by_type[r.motion_type].push_back(&r);
    }
    std::vector<std::string> types;
    for (const auto& [t, _] : by_type) types.push_back(t);
    std::stable_sort(types.begin(), types.end(), [](const std::string& a, const std::string& b) {
        return detail::motion_type_rank(a) < detail::motion_type_rank(b);
    });

    EvalReport rep;
    std::vector<LabeledScore> all_slices, all_volumes;
    std::vector<std::optional<double>> slice_aucs, volume_aucs;
    for (const auto& t : types) {
        std::vector<LabeledScore> slices, volumes;
        EvalRow row;
        row.motion_type = t;
        for (const VolumeResult* r : by_type[t]) {
            volumes.push_back({r->verdict.y_pred, r->label, r->volume_id, t});
            for (std::size_t i = 0; i < r->verdict.scores.size(); ++i)
                slices.push_back({r->verdict.scores[i], r->label, r->volume_id + "/" + std::to_string(i), t});
            ++row.volumes;
            row.positives += r->label;
            const bool motion = r->verdict.y_final == Verdict::Motion;
            rep.correct += motion == (r->label == 1);
            if (r->label == 0) {
                ++rep.negatives;
                rep.negatives_classified_negative += !motion;
            }
        }
        row.slice_auc = detail::auc_if_defined(slices);
        row.volume_auc = detail::auc_if_defined(volumes);
        slice_aucs.push_back(row.slice_auc);
        volume_aucs.push_back(row.volume_auc);
        rep.average.volumes += row.volumes;
        rep.average.positives += row.positives;
        all_slices.insert(all_slices.end(), slices.begin(), slices.end());
        all_volumes.insert(all_volumes.end(), volumes.begin(), volumes.end());
        rep.rows.push_back(std::move(row));
    }
    rep.total = rep.average.volumes;
    rep.average.motion_type = "Average";
    rep.average.slice_auc = detail::mean_defined(slice_aucs);
    rep.average.volume_auc = detail::mean_defined(volume_aucs);
    rep.pooled_slice_auc = detail::auc_if_defined(all_slices);
    rep.pooled_volume_auc = detail::auc_if_defined(all_volumes);
    return rep;
}

inline std::string format_report(const EvalReport& rep) {
    auto cell = [](const std::optional<double>& v) {
        std::ostringstream ss;
        if (v) ss << std::fixed << std::setprecision(3) << *v;
        else ss << "n/a";
        return ss.str();
    };
    std::ostringstream out;
    out << std::left << std::setw(10) << "Motion" << std::right << std::setw(12) << "Slice AUC" << std::setw(12)
        << "Volume AUC" << std::setw(10) << "Volumes" << std::setw(10) << "Positive" << "\n";
    auto line = [&](const EvalRow& r) {
        out << std::left << std::setw(10) << r.motion_type << std::right << std::setw(12) << cell(r.slice_auc)
            << std::setw(12) << cell(r.volume_auc) << std::setw(10) << r.volumes << std::setw(10) << r.positives
            << "\n";
    };
    for (const auto& r : rep.rows) line(r);
    out << std::string(54, '-') << "\n";
    line(rep.average);
    out << "\npooled volume AUC-PR " << cell(rep.pooled_volume_auc) << ", pooled slice AUC-PR "
        << cell(rep.pooled_slice_auc) << "\n";
    out << "accuracy " << rep.correct << "/" << rep.total << ", clean volumes classified negative "
        << rep.negatives_classified_negative << "/" << rep.negatives << "\n";
    return out.str();
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    auto row = [&](const EvalRow& r) {
        return nlohmann::json{{"slice_auc_pr", opt(r.slice_auc)},
                              {"volume_auc_pr", opt(r.volume_auc)},
                              {"volumes", r.volumes},
                              {"positives", r.positives}};
    };
    nlohmann::json types = nlohmann::json::object();
    nlohmann::json order = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        types[r.motion_type] = row(r);
        order.push_back(r.motion_type);
    }
    return {{"motion_types", types},
            {"order", order},
            {"average", row(rep.average)},
            {"pooled", {{"slice_auc_pr", opt(rep.pooled_slice_auc)}, {"volume_auc_pr", opt(rep.pooled_volume_auc)}}},
            {"accuracy", {{"correct", rep.correct}, {"total", rep.total}}},
            {"clean_volumes", {{"total", rep.negatives}, {"classified_negative", rep.negatives_classified_negative}}}};
}

} // namespace cbctmotion

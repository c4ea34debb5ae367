#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "common.hpp"
#include "recon.hpp"
#include "volume.hpp"

namespace cbctmotion {

struct Slice {
    Image image;
    std::string volume_id;
    int index = 0;
};

inline constexpr int kFeatureCount = 6;
using FeatureVector = std::array<double, kFeatureCount>;

inline const std::array<std::string, kFeatureCount>& feature_names() {
    static const std::array<std::string, kFeatureCount> names = {
        "tv_over_mean", "orientation_entropy", "hf_energy_ratio",
        "laplacian_variance", "edge_doubling", "bright_fraction"};
    return names;
}

// ---------------------------------------------------------------------------
// Slice extraction and normalization

/// Axial slice indices for a volume of `nz` slices. Evenly spaced with
/// rounding when nz >= n; every slice otherwise.
inline std::vector<int> axial_slice_indices(int nz, int n) {
    require(nz >= 1, "volume has no slices");
    require(n >= 1, "slice count must be positive");
    std::vector<int> idx;
    if (nz < n) {
        idx.resize(nz);
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }
    if (n == 1) return {static_cast<int>(std::lround(0.5 * (nz - 1)))};
    for (int i = 0; i < n; ++i)
        idx.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (nz - 1) / (n - 1))));
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    // pad with the unused slice nearest to an already selected one
    std::vector<bool> used(nz, false);
    for (int i : idx) used[i] = true;
    while (static_cast<int>(idx.size()) < n) {
        int best = -1, best_dist = nz + 1;
        for (int z = 0; z < nz; ++z) {
            if (used[z]) continue;
            for (int s : idx)
                if (std::abs(z - s) < best_dist) {
                    best_dist = std::abs(z - s);
                    best = z;
                }
        }
        used[best] = true;
        idx.insert(std::upper_bound(idx.begin(), idx.end(), best), best);
    }
    return idx;
}

inline Image axial_slice(const Volume& volume, int z) {
    Image img(volume.nx(), volume.ny());
    for (int y = 0; y < volume.ny(); ++y)
        for (int x = 0; x < volume.nx(); ++x) img.at(x, y) = volume.at(x, y, z);
    return img;
}

inline std::vector<Slice> extract_axial_slices(const Volume& volume, int n = 300,
                                               const std::string& volume_id = {}) {
    std::vector<Slice> out;
    for (int z : axial_slice_indices(volume.nz(), n))
        out.push_back({axial_slice(volume, z), volume_id, z});
    return out;
}

/// Bilinear resampling with pixel centers at half-integer positions and edge
/// clamping. Same-size input is returned unchanged.
inline Image resize_bilinear(const Image& in, int width, int height) {
    require(in.width > 0 && in.height > 0 && width > 0 && height > 0, "resize needs non-empty images");
    if (in.width == width && in.height == height) return in;
    Image out(width, height);
    const double sx = static_cast<double>(in.width) / width;
    const double sy = static_cast<double>(in.height) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, in.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, in.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, in.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, in.width - 1);
            const double wx = fx - x0;
            const double top = in.at(x0, y0) + wx * (in.at(x1, y0) - in.at(x0, y0));
            const double bot = in.at(x0, y1) + wx * (in.at(x1, y1) - in.at(x0, y1));
            out.at(x, y) = top + wy * (bot - top);
        }
    }
    return out;
}

/// Nearest-rank percentile, q in (0, 100].
inline double percentile(std::vector<double> values, double q) {
    require(!values.empty(), "percentile of an empty set");
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
    return values[rank - 1];
}

/// Resizes to out_size x out_size, then clamps to [0, p99.5] and scales to
/// [0, 1]. Scaling after the resize keeps the operation idempotent.
inline Slice normalize_slice(const Slice& raw, int out_size = 256) {
    Slice s = raw;
    s.image = resize_bilinear(raw.image, out_size, out_size);
    const double hi = percentile(s.image.pixels, 99.5);
    for (double& v : s.image.pixels) v = hi > 0.0 ? std::clamp(v, 0.0, hi) / hi : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Features

namespace detail {

/// Central-difference gradients on interior pixels.
struct Gradients {
    int width = 0, height = 0;
    std::vector<double> gx, gy;
};

inline Gradients central_gradients(const Image& img) {
    Gradients g;
    g.width = std::max(0, img.width - 2);
    g.height = std::max(0, img.height - 2);
    g.gx.resize(static_cast<std::size_t>(g.width) * g.height);
    g.gy.resize(g.gx.size());
    for (int y = 1; y + 1 < img.height; ++y)
        for (int x = 1; x + 1 < img.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y - 1) * g.width + (x - 1);
            g.gx[i] = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            g.gy[i] = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
        }
    return g;
}

inline double tv_over_mean(const Image& img) {
    double tv = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (x + 1 < img.width) tv += std::abs(img.at(x + 1, y) - img.at(x, y));
            if (y + 1 < img.height) tv += std::abs(img.at(x, y + 1) - img.at(x, y));
        }
    const double n = static_cast<double>(img.pixels.size());
    const double mean = std::accumulate(img.pixels.begin(), img.pixels.end(), 0.0) / n;
    return mean > 0.0 ? (tv / n) / mean : 0.0;
}

inline double orientation_entropy(const Gradients& g) {
    constexpr int bins = 18;
    std::array<double, bins> hist{};
    double total = 0.0;
    for (std::size_t i = 0; i < g.gx.size(); ++i) {
        const double mag = std::hypot(g.gx[i], g.gy[i]);
        if (mag == 0.0) continue;
        double theta = std::atan2(g.gy[i], g.gx[i]);
        if (theta < 0.0) theta += kPi;
        if (theta >= kPi) theta -= kPi;
        int b = static_cast<int>(theta / kPi * bins);
        b = std::clamp(b, 0, bins - 1);
        hist[b] += mag;
        total += mag;
    }
    if (total == 0.0) return 0.0;
    double h = 0.0;
    for (double c : hist)
        if (c > 0.0) h -= (c / total) * std::log(c / total);
    return h;
}

inline double high_frequency_ratio(const Image& img) {
    const int w = img.width, h = img.height;
    std::vector<double> in(img.pixels);
    std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * (w / 2 + 1));
    {
        fftw_plan plan;
        {
            std::lock_guard lock(fftw_planner_mutex());
            plan = fftw_plan_dft_r2c_2d(h, w, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                        FFTW_ESTIMATE);
        }
        fftw_execute(plan);
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    double band = 0.0, total = 0.0;
    for (int ky = 0; ky < h; ++ky) {
        const double fy = static_cast<double>(ky <= h / 2 ? ky : ky - h) / h;
        for (int kx = 0; kx <= w / 2; ++kx) {
            if (kx == 0 && ky == 0) continue;
            const double fx = static_cast<double>(kx) / w;
            // half spectrum: interior columns stand for their conjugate twin too
            const bool twin = kx > 0 && !(w % 2 == 0 && kx == w / 2);
            const double e = std::norm(out[static_cast<std::size_t>(ky) * (w / 2 + 1) + kx]) * (twin ? 2.0 : 1.0);
            const double r = std::hypot(fx, fy) / 0.5;
            total += e;
            if (r >= 0.25 && r <= 0.5) band += e;
        }
    }
    return total > 0.0 ? band / total : 0.0;
}

inline double laplacian_variance(const Image& img) {
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (int y = 1; y + 1 < img.height; ++y)
        for (int x = 1; x + 1 < img.width; ++x) {
            const double l = img.at(x + 1, y) + img.at(x - 1, y) + img.at(x, y + 1) +
                             img.at(x, y - 1) - 4.0 * img.at(x, y);
            sum += l;
            sum2 += l * l;
            ++n;
        }
    if (n == 0) return 0.0;
    const double mean = sum / n;
    return std::max(0.0, sum2 / n - mean * mean);
}

/// Strongest local maximum of the normalized gradient-magnitude
/// autocorrelation along either image axis within lags [2, 10].
inline double edge_doubling(const Gradients& g) {
    constexpr int max_lag = 10;
    if (g.width <= max_lag + 1 || g.height <= max_lag + 1) return 0.0;
    std::vector<double> mag(g.gx.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < mag.size(); ++i) {
        mag[i] = std::hypot(g.gx[i], g.gy[i]);
        mean += mag[i];
    }
    mean /= static_cast<double>(mag.size());
    double energy = 0.0;
    for (double& m : mag) {
        m -= mean;
        energy += m * m;
    }
    if (energy == 0.0) return 0.0;
    auto at = [&](int x, int y) { return mag[static_cast<std::size_t>(y) * g.width + x]; };
    double best = 0.0;
    for (int axis = 0; axis < 2; ++axis) {
        std::array<double, max_lag + 2> ac{};
        for (int lag = 0; lag <= max_lag + 1; ++lag) {
            double s = 0.0;
            for (int y = 0; y < g.height - (axis == 1 ? lag : 0); ++y)
                for (int x = 0; x < g.width - (axis == 0 ? lag : 0); ++x)
                    s += at(x, y) * (axis == 0 ? at(x + lag, y) : at(x, y + lag));
            ac[lag] = s / energy;
        }
        for (int lag = 2; lag <= max_lag; ++lag)
            if (ac[lag] > ac[lag - 1] && ac[lag] >= ac[lag + 1]) best = std::max(best, ac[lag]);
    }
    return best;
}

inline double bright_fraction(const Image& img) {
    const auto n = std::count_if(img.pixels.begin(), img.pixels.end(), [](double v) { return v > 0.8; });
    return static_cast<double>(n) / static_cast<double>(img.pixels.size());
}

} // namespace detail

inline FeatureVector compute_features(const Image& img) {
    require(img.width >= 3 && img.height >= 3, "features need at least a 3 x 3 slice");
    for (double v : img.pixels)
        if (!std::isfinite(v)) throw NumericError("non-finite slice pixel");
    const detail::Gradients g = detail::central_gradients(img);
    FeatureVector f = {detail::tv_over_mean(img),         detail::orientation_entropy(g),
                       detail::high_frequency_ratio(img), detail::laplacian_variance(img),
                       detail::edge_doubling(g),          detail::bright_fraction(img)};
    for (double v : f)
        if (!std::isfinite(v)) throw NumericError("non-finite slice feature");
    return f;
}

inline FeatureVector compute_features(const Slice& slice) { return compute_features(slice.image); }

// ---------------------------------------------------------------------------
// Scorers

/// Maps a normalized slice to a motion probability.
class SliceScorer {
  public:
    virtual ~SliceScorer() = default;
    virtual double score(const Slice& slice) const = 0;
};

struct TrainingConfig {
    double learning_rate = 1e-3;
    double momentum = 0.9;
    int epochs = 300;
    int batch_size = 0; ///< 0 trains on the full set each step
    std::uint64_t seed = 0;
};

inline double sigmoid(double z) {
    constexpr double eps = 1e-15;
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return std::clamp(s, eps, 1.0 - eps);
}

/// Logistic regression over standardized slice features.
class LogisticScorer : public SliceScorer {
  public:
    FeatureVector mean{};
    FeatureVector scale{1, 1, 1, 1, 1, 1};
    FeatureVector weights{};
    double bias = 0.0;
    TrainingConfig config;
    std::vector<double> loss_trace;

    double logit(const FeatureVector& f) const {
        double z = bias;
        for (int j = 0; j < kFeatureCount; ++j) z += weights[j] * ((f[j] - mean[j]) / scale[j]);
        return z;
    }
    double score(const FeatureVector& f) const { return sigmoid(logit(f)); }
    double score(const Slice& slice) const override { return score(compute_features(slice)); }
};

namespace detail {

inline double bce(double p, int y) { return -(y ? std::log(p) : std::log(1.0 - p)); }

} // namespace detail

/// Minimizes mean binary cross-entropy with heavy-ball momentum
/// (v <- mu v + g, w <- w - lr v), starting from zero weights. Standardization
/// statistics come from the training features. loss_trace holds the full-set
/// loss before training and after every epoch.
inline LogisticScorer train_scorer(std::span<const FeatureVector> features, std::span<const int> labels,
                                   const TrainingConfig& config = {}) {
    require(features.size() == labels.size(), "one label per feature vector is required");
    require(config.epochs >= 0 && config.batch_size >= 0, "epochs and batch size must be non-negative");
    bool has_pos = false, has_neg = false;
    for (int y : labels) {
        require(y == 0 || y == 1, "labels must be 0 or 1");
        (y ? has_pos : has_neg) = true;
    }
    require(has_pos && has_neg, "training data must contain both classes");

    const std::size_t n = features.size();
    LogisticScorer model;
    model.config = config;
    for (int j = 0; j < kFeatureCount; ++j) {
        double s = 0.0;
        for (const auto& f : features) s += f[j];
        const double m = s / n;
        double v = 0.0;
        for (const auto& f : features) v += (f[j] - m) * (f[j] - m);
        const double sd = std::sqrt(v / n);
        model.mean[j] = m;
        model.scale[j] = sd > 0.0 ? sd : 1.0;
    }
    std::vector<FeatureVector> x(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < kFeatureCount; ++j) x[i][j] = (features[i][j] - model.mean[j]) / model.scale[j];

    auto full_loss = [&] {
        double l = 0.0;
        for (std::size_t i = 0; i < n; ++i) l += detail::bce(model.score(features[i]), labels[i]);
        return l / n;
    };

    FeatureVector vw{};
    double vb = 0.0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(config.seed);
    const std::size_t batch = config.batch_size == 0 ? n : static_cast<std::size_t>(config.batch_size);

    model.loss_trace.push_back(full_loss());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (batch < n)
            for (std::size_t i = n - 1; i > 0; --i)
                std::swap(order[i], order[static_cast<std::size_t>(rng.next() % (i + 1))]);
        for (std::size_t b0 = 0; b0 < n; b0 += batch) {
            const std::size_t b1 = std::min(n, b0 + batch);
            FeatureVector gw{};
            double gb = 0.0;
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t i = order[k];
                double z = model.bias;
                for (int j = 0; j < kFeatureCount; ++j) z += model.weights[j] * x[i][j];
                const double r = sigmoid(z) - labels[i];
                for (int j = 0; j < kFeatureCount; ++j) gw[j] += r * x[i][j];
                gb += r;
            }
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (int j = 0; j < kFeatureCount; ++j) {
                vw[j] = config.momentum * vw[j] + gw[j] * inv;
                model.weights[j] -= config.learning_rate * vw[j];
            }
            vb = config.momentum * vb + gb * inv;
            model.bias -= config.learning_rate * vb;
        }
        model.loss_trace.push_back(full_loss());
    }
    return model;
}

// ---------------------------------------------------------------------------
// Volume-level decision

enum class Verdict { NoMotion, Motion };

inline const char* to_string(Verdict v) { return v == Verdict::Motion ? "motion" : "no_motion"; }

struct VolumeVerdict {
    double y_pred = 0.0;
    Verdict y_final = Verdict::NoMotion;
    std::vector<double> scores;
    std::size_t n() const { return scores.size(); }
};

/// Mean of the slice scores, summed with Neumaier compensation.
inline double volume_average(std::span<const double> scores) {
    require(!scores.empty(), "cannot average an empty score list");
    double sum = 0.0, comp = 0.0;
    for (double s : scores) {
        const double t = sum + s;
        comp += std::abs(sum) >= std::abs(s) ? (sum - t) + s : (s - t) + sum;
        sum = t;
    }
    return (sum + comp) / static_cast<double>(scores.size());
}

inline Verdict classify_volume(double y_pred) { return y_pred >= 0.5 ? Verdict::Motion : Verdict::NoMotion; }

inline VolumeVerdict make_verdict(std::vector<double> scores) {
    VolumeVerdict v;
    v.y_pred = volume_average(scores);
    v.y_final = classify_volume(v.y_pred);
    v.scores = std::move(scores);
    return v;
}

/// Normalized slices of a volume, ready for scoring.
inline std::vector<Slice> prepare_slices(const Volume& volume, int n_slices, int out_size,
                                         const std::string& volume_id = {}, unsigned workers = 0) {
    std::vector<Slice> raw = extract_axial_slices(volume, n_slices, volume_id);
    std::vector<Slice> out(raw.size());
    parallel_for(raw.size(), [&](std::size_t i) { out[i] = normalize_slice(raw[i], out_size); }, workers);
    return out;
}

inline std::vector<FeatureVector> slice_features(std::span<const Slice> slices, unsigned workers = 0) {
    std::vector<FeatureVector> f(slices.size());
    parallel_for(slices.size(), [&](std::size_t i) { f[i] = compute_features(slices[i]); }, workers);
    return f;
}

inline VolumeVerdict score_volume(const SliceScorer& scorer, std::span<const Slice> slices,
                                  unsigned workers = 0) {
    std::vector<double> scores(slices.size());
    parallel_for(slices.size(), [&](std::size_t i) { scores[i] = scorer.score(slices[i]); }, workers);
    return make_verdict(std::move(scores));
}

} // namespace cbctmotion

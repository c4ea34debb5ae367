#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include <cbctmotion/detector.hpp>

using namespace cbctmotion;

namespace {

Image random_image(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    Image img(w, h);
    for (double& v : img.pixels) v = rng.uniform(lo, hi);
    return img;
}

// smooth blobs plus a little noise, closer to a reconstructed slice than white noise
Image blob_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    Image img(n, n);
    for (int b = 0; b < 6; ++b) {
        const double cx = rng.uniform(0.2, 0.8) * n, cy = rng.uniform(0.2, 0.8) * n;
        const double r = rng.uniform(0.05, 0.2) * n, a = rng.uniform(0.2, 1.0);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < r * r) img.at(x, y) += a;
    }
    for (double& v : img.pixels) v += 0.02 * rng.uniform();
    return img;
}

Image rotate90(const Image& in) {
    Image out(in.height, in.width);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) out.at(in.height - 1 - y, x) = in.at(x, y);
    return out;
}

double mean(const Image& img) {
    return std::accumulate(img.pixels.begin(), img.pixels.end(), 0.0) / static_cast<double>(img.pixels.size());
}

std::vector<int> rule_indices(int nz, int n) {
    std::vector<int> out;
    for (int i = 0; i < n; ++i) {
        const int z = static_cast<int>(std::floor(static_cast<double>(i) * (nz - 1) / (n - 1) + 0.5));
        if (out.empty() || out.back() != z) out.push_back(z);
    }
    return out;
}

Volume ramp_volume(int nz) {
    Volume v(Grid::centered({8, 6, nz}, 1.0));
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 8; ++x) v.at(x, y, z) = static_cast<float>(z);
    return v;
}

struct ToyData {
    std::vector<FeatureVector> x;
    std::vector<int> y;
};

ToyData toy_data(std::uint64_t seed, int n = 60) {
    Rng rng(seed);
    ToyData d;
    for (int i = 0; i < n; ++i) {
        const int label = i % 2;
        FeatureVector f;
        for (int j = 0; j < kFeatureCount; ++j) f[j] = rng.normal() + (label ? 0.8 * (j + 1) : 0.0);
        d.x.push_back(f);
        d.y.push_back(label);
    }
    return d;
}

} // namespace

TEST(SliceIndices, Examples) {
    std::vector<int> all(300);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(axial_slice_indices(300, 300), all);
    EXPECT_EQ(axial_slice_indices(96, 300).size(), 96u);
    EXPECT_EQ(axial_slice_indices(96, 300).back(), 95);
    EXPECT_EQ(axial_slice_indices(11, 1), std::vector<int>{5});
}

TEST(SliceIndices, FollowRoundingRule) {
    for (int nz : {300, 301, 440, 600, 1000}) {
        const auto got = axial_slice_indices(nz, 300);
        EXPECT_EQ(got, rule_indices(nz, 300)) << nz;
        EXPECT_EQ(got.front(), 0);
        EXPECT_EQ(got.back(), nz - 1);
    }
    const auto six = axial_slice_indices(600, 300);
    for (int i = 0; i < 150; ++i) EXPECT_EQ(six[i], 2 * i);
}

TEST(SliceIndices, PaddedToExactCount) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(2, 120);
        const int nz = rng.uniform_int(n, 400);
        const auto idx = axial_slice_indices(nz, n);
        ASSERT_EQ(static_cast<int>(idx.size()), n);
        EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
        EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
        for (int z : rule_indices(nz, n)) EXPECT_TRUE(std::binary_search(idx.begin(), idx.end(), z));
    }
}

TEST(SliceIndices, Errors) {
    EXPECT_THROW(axial_slice_indices(0, 10), ValidationError);
    EXPECT_THROW(axial_slice_indices(10, 0), ValidationError);
}

TEST(ExtractSlices, CarryIndexAndContent) {
    const auto s = extract_axial_slices(ramp_volume(20), 5, "vol");
    ASSERT_EQ(s.size(), 5u);
    for (const auto& sl : s) {
        EXPECT_EQ(sl.volume_id, "vol");
        EXPECT_EQ(sl.image.width, 8);
        EXPECT_EQ(sl.image.height, 6);
        EXPECT_EQ(sl.image.at(3, 2), sl.index);
    }
    EXPECT_EQ(extract_axial_slices(ramp_volume(4), 300).size(), 4u);
}

TEST(Normalize, ZeroSliceStaysZero) {
    const Slice s = normalize_slice(Slice{Image(40, 30), "z", 0}, 64);
    EXPECT_EQ(s.image.width, 64);
    EXPECT_EQ(s.image.height, 64);
    for (double v : s.image.pixels) EXPECT_EQ(v, 0.0);
}

TEST(Normalize, ConstantSliceBecomesOnes) {
    const Slice s = normalize_slice(Slice{Image(32, 32, 0.37), "c", 0}, 256);
    for (double v : s.image.pixels) EXPECT_EQ(v, 1.0);
}

TEST(Normalize, ResizedCheckerboardKeepsMean) {
    Image cb(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) cb.at(x, y) = ((x / 2 + y / 2) % 2) ? 1.0 : 0.0;
    const Image up = resize_bilinear(cb, 256, 256);
    EXPECT_NEAR(mean(up), mean(cb), 0.02 * mean(cb));
    const Image down = resize_bilinear(cb, 48, 48);
    EXPECT_NEAR(mean(down), mean(cb), 0.02 * mean(cb));
    EXPECT_NEAR(mean(normalize_slice(Slice{cb, "", 0}, 256).image), 0.5, 0.01);
}

TEST(Normalize, RangeAndIdempotence) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const int w = rng.uniform_int(5, 90), h = rng.uniform_int(5, 90);
        Image img = random_image(w, h, 100 + trial, -0.2, 3.0);
        img.at(0, 0) = 50.0; // metal-like hot pixel
        const Slice once = normalize_slice(Slice{img, "r", trial}, 64);
        for (double v : once.image.pixels) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        EXPECT_EQ(normalize_slice(once, 64).image.pixels, once.image.pixels);
    }
}

TEST(Percentile, NearestRank) {
    std::vector<double> v(200);
    std::iota(v.begin(), v.end(), 1.0);
    EXPECT_EQ(percentile(v, 99.5), 199.0);
    EXPECT_EQ(percentile(v, 100.0), 200.0);
    EXPECT_EQ(percentile(v, 50.0), 100.0);
    EXPECT_THROW(percentile({}, 50.0), ValidationError);
}

TEST(Features, ConstantSlice) {
    const FeatureVector f = compute_features(Image(64, 64, 0.4));
    EXPECT_EQ(f[0], 0.0);
    EXPECT_EQ(f[3], 0.0);
    EXPECT_EQ(f[5], 0.0);
    for (double v : f) EXPECT_TRUE(std::isfinite(v));
    const FeatureVector z = compute_features(Image(16, 16));
    for (double v : z) EXPECT_TRUE(std::isfinite(v));
}

TEST(Features, SinusoidHasLowOrientationEntropy) {
    Image s(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) s.at(x, y) = 0.5 + 0.5 * std::sin(2.0 * kPi * x / 16.0);
    const double sinusoid = compute_features(s)[1];
    const double noise = compute_features(random_image(64, 64, 3))[1];
    EXPECT_LT(sinusoid, 1e-9);
    EXPECT_GT(noise, 2.5); // log(18) = 2.89 for a flat histogram
}

TEST(Features, RotationInvariantSubset) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Image img = normalize_slice(Slice{blob_image(96, seed), "", 0}, 96).image;
        const FeatureVector a = compute_features(img), b = compute_features(rotate90(img));
        for (int j : {0, 2, 3, 5}) EXPECT_NEAR(a[j], b[j], 1e-6) << feature_names()[j];
    }
}

TEST(Features, BrightFractionCounts) {
    Image img(10, 10, 0.5);
    for (int i = 0; i < 7; ++i) img.pixels[i] = 0.95;
    img.pixels[9] = 0.8;
    EXPECT_DOUBLE_EQ(compute_features(img)[5], 0.07);
}

TEST(Features, EdgeDoublingDetectsGhostEdges) {
    // one disk versus the same disk plus a shifted copy, as left by a sudden move
    Image single(96, 96), doubled(96, 96);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x) {
            const bool a = (x - 45) * (x - 45) + (y - 48) * (y - 48) < 400;
            const bool b = (x - 51) * (x - 51) + (y - 48) * (y - 48) < 400;
            single.at(x, y) = a ? 1.0 : 0.0;
            doubled.at(x, y) = 0.5 * a + 0.5 * b;
        }
    EXPECT_GT(compute_features(doubled)[4], compute_features(single)[4]);
}

TEST(Features, Errors) {
    EXPECT_THROW(compute_features(Image(2, 8)), ValidationError);
    Image bad(8, 8, 0.1);
    bad.at(3, 3) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(compute_features(bad), NumericError);
}

TEST(Features, NamesAndDeterminism) {
    EXPECT_EQ(feature_names().size(), static_cast<std::size_t>(kFeatureCount));
    const Image img = blob_image(64, 9);
    EXPECT_EQ(compute_features(img), compute_features(img));
}

TEST(Train, SeparablePoints) {
    const std::vector<FeatureVector> x = {FeatureVector{0, 0, 0, 0, 0, 0}, FeatureVector{1, 2, 0, 1, 0, 3}};
    const std::vector<int> y = {0, 1};
    TrainingConfig cfg;
    cfg.epochs = 500;
    const LogisticScorer m = train_scorer(x, y, cfg);
    EXPECT_LT(m.score(x[0]), 0.5);
    EXPECT_GT(m.score(x[1]), 0.5);
    ASSERT_EQ(m.loss_trace.size(), 501u);
    EXPECT_LT(m.loss_trace.back(), m.loss_trace.front());
    EXPECT_NEAR(m.loss_trace.front(), std::log(2.0), 1e-12);
}

TEST(Train, SingleClassRejected) {
    const std::vector<FeatureVector> x(3);
    EXPECT_THROW(train_scorer(x, std::vector<int>{1, 1, 1}), ValidationError);
    EXPECT_THROW(train_scorer(x, std::vector<int>{0, 1}), ValidationError);
    EXPECT_THROW(train_scorer(x, std::vector<int>{0, 1, 2}), ValidationError);
}

TEST(Train, DuplicatedDataGivesSameWeights) {
    const ToyData d = toy_data(1);
    ToyData twice = d;
    twice.x.insert(twice.x.end(), d.x.begin(), d.x.end());
    twice.y.insert(twice.y.end(), d.y.begin(), d.y.end());
    TrainingConfig cfg;
    cfg.epochs = 200;
    const LogisticScorer a = train_scorer(d.x, d.y, cfg), b = train_scorer(twice.x, twice.y, cfg);
    for (int j = 0; j < kFeatureCount; ++j) {
        EXPECT_NEAR(a.weights[j], b.weights[j], 1e-12);
        EXPECT_NEAR(a.mean[j], b.mean[j], 1e-12);
        EXPECT_NEAR(a.scale[j], b.scale[j], 1e-12);
    }
    EXPECT_NEAR(a.bias, b.bias, 1e-12);
}

TEST(Train, FlippedLabelsNegateWeights) {
    const ToyData d = toy_data(2);
    std::vector<int> flipped(d.y.size());
    for (std::size_t i = 0; i < d.y.size(); ++i) flipped[i] = 1 - d.y[i];
    TrainingConfig cfg;
    cfg.epochs = 300;
    const LogisticScorer a = train_scorer(d.x, d.y, cfg), b = train_scorer(d.x, flipped, cfg);
    for (int j = 0; j < kFeatureCount; ++j) EXPECT_NEAR(a.weights[j], -b.weights[j], 1e-6);
    EXPECT_NEAR(a.bias, -b.bias, 1e-6);
    EXPECT_GT(std::abs(a.weights[0]), 1e-3);
}

TEST(Train, DeterministicGivenSeed) {
    const ToyData d = toy_data(3, 101);
    TrainingConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 16;
    cfg.seed = 77;
    const LogisticScorer a = train_scorer(d.x, d.y, cfg), b = train_scorer(d.x, d.y, cfg);
    EXPECT_EQ(a.weights, b.weights);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
    cfg.seed = 78;
    EXPECT_NE(train_scorer(d.x, d.y, cfg).weights, a.weights);
}

TEST(Train, StandardizationUsesTrainingData) {
    const ToyData d = toy_data(4);
    const LogisticScorer m = train_scorer(d.x, d.y, TrainingConfig{});
    for (int j = 0; j < kFeatureCount; ++j) {
        double s = 0.0, ss = 0.0;
        for (const auto& f : d.x) s += f[j];
        const double mu = s / d.x.size();
        for (const auto& f : d.x) ss += (f[j] - mu) * (f[j] - mu);
        EXPECT_NEAR(m.mean[j], mu, 1e-12);
        EXPECT_NEAR(m.scale[j], std::sqrt(ss / d.x.size()), 1e-12);
    }
}

TEST(Score, ZeroWeightsGiveOneHalf) {
    const LogisticScorer m;
    EXPECT_EQ(m.score(FeatureVector{1, 2, 3, 4, 5, 6}), 0.5);
    EXPECT_EQ(m.score(Slice{blob_image(32, 1), "", 0}), 0.5);
}

TEST(Score, MonotoneInWeight) {
    LogisticScorer m;
    const FeatureVector f{0.3, 1.0, 0.2, 0.5, 0.1, 0.05};
    double prev = m.score(f);
    for (int k = 1; k <= 10; ++k) {
        m.weights[1] = 0.3 * k;
        const double s = m.score(f);
        EXPECT_GT(s, prev);
        prev = s;
    }
}

TEST(Score, MatchesScalarRecomputation) {
    Rng rng(21);
    LogisticScorer m;
    m.bias = rng.uniform(-1, 1);
    for (int j = 0; j < kFeatureCount; ++j) {
        m.mean[j] = rng.uniform(-1, 1);
        m.scale[j] = rng.uniform(0.5, 2.0);
        m.weights[j] = rng.uniform(-2, 2);
    }
    for (int trial = 0; trial < 100; ++trial) {
        FeatureVector f;
        for (double& v : f) v = rng.uniform(-3, 3);
        double z = m.bias;
        z += m.weights[0] * (f[0] - m.mean[0]) / m.scale[0];
        z += m.weights[1] * (f[1] - m.mean[1]) / m.scale[1];
        z += m.weights[2] * (f[2] - m.mean[2]) / m.scale[2];
        z += m.weights[3] * (f[3] - m.mean[3]) / m.scale[3];
        z += m.weights[4] * (f[4] - m.mean[4]) / m.scale[4];
        z += m.weights[5] * (f[5] - m.mean[5]) / m.scale[5];
        EXPECT_NEAR(m.score(f), 1.0 / (1.0 + std::exp(-z)), 1e-12);
    }
}

TEST(Score, StrictlyInsideUnitInterval) {
    LogisticScorer m;
    m.weights[0] = 1e6;
    EXPECT_LT(m.score(FeatureVector{10, 0, 0, 0, 0, 0}), 1.0);
    EXPECT_GT(m.score(FeatureVector{-10, 0, 0, 0, 0, 0}), 0.0);
    EXPECT_EQ(sigmoid(0.0), 0.5);
}

TEST(VolumeAverage, Examples) {
    EXPECT_EQ(volume_average(std::vector<double>(300, 0.0)), 0.0);
    EXPECT_EQ(volume_average(std::vector<double>{0.37}), 0.37);
    std::vector<double> s(195, 0.8);
    s.insert(s.end(), 105, 0.4);
    EXPECT_EQ(volume_average(s), 0.66);
    EXPECT_EQ(make_verdict(s).y_final, Verdict::Motion);
    EXPECT_THROW(volume_average(std::vector<double>{}), ValidationError);
}

TEST(ClassifyVolume, Threshold) {
    EXPECT_EQ(classify_volume(0.49), Verdict::NoMotion);
    EXPECT_EQ(classify_volume(0.5), Verdict::Motion);
    EXPECT_EQ(classify_volume(1.0), Verdict::Motion);
    EXPECT_EQ(classify_volume(std::nextafter(0.5, 0.0)), Verdict::NoMotion);
    EXPECT_STREQ(to_string(Verdict::Motion), "motion");
    EXPECT_STREQ(to_string(Verdict::NoMotion), "no_motion");
}

TEST(VolumeAverage, PermutationInvariantAndBounded) {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = rng.uniform_int(1, 300);
        std::vector<double> s(n);
        for (double& v : s) v = rng.uniform();
        const double a = volume_average(s);
        EXPECT_GE(a, *std::min_element(s.begin(), s.end()));
        EXPECT_LE(a, *std::max_element(s.begin(), s.end()));
        for (int i = n - 1; i > 0; --i) std::swap(s[i], s[rng.uniform_int(0, i)]);
        EXPECT_NEAR(volume_average(s), a, 1e-15);
        EXPECT_EQ(classify_volume(volume_average(s)), classify_volume(a));
    }
}

TEST(ScoreVolume, AveragesSliceScores) {
    Volume v(Grid::centered({32, 32, 12}, 1.0));
    Rng rng(5);
    for (float& x : v.values) x = static_cast<float>(rng.uniform());
    LogisticScorer m;
    m.weights[0] = 0.7;
    m.weights[5] = -1.3;
    m.bias = 0.1;
    const auto slices = prepare_slices(v, 8, 48, "v", 2);
    ASSERT_EQ(slices.size(), 8u);
    const VolumeVerdict verdict = score_volume(m, slices, 3);
    ASSERT_EQ(verdict.n(), 8u);
    double sum = 0.0;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        EXPECT_EQ(verdict.scores[i], m.score(slices[i]));
        sum += verdict.scores[i];
    }
    EXPECT_NEAR(verdict.y_pred, sum / 8.0, 1e-15);
    EXPECT_EQ(score_volume(m, slices, 1).scores, verdict.scores);
}

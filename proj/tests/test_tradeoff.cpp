#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "arrest/tradeoff.hpp"
#include "testutil.hpp"

using namespace arrest;

namespace {

// Published reference rows: label, standard accuracy, robustness, distance.
struct Row {
    const char* label;
    double p, q, d;
};

// CIFAR-10 comparison table.
constexpr Row kRows10[] = {
    {"AT", 87.14, 44.04, -1.500},     {"LAS-AT", 86.23, 53.58, 2.236},
    {"AWP", 85.57, 54.04, 2.314},     {"S2O", 85.67, 54.10, 2.410},
    {"LBGAT", 88.22, 52.18, 2.706},   {"ARREST", 90.24, 50.20, 3.521},
};

// CIFAR-100 comparison table. The AWP row's published distance (2.424) is
// inconsistent with the published curve: the minimum distance from
// (60.38, 28.86) to c100 is 2.4341, so the recomputed value is asserted here.
constexpr Row kRows100[] = {
    {"AT", 59.59, 22.86, -3.268},     {"LAS-AT", 61.80, 29.03, 3.189},
    {"AWP", 60.38, 28.86, 2.434143},  {"S2O", 63.40, 27.60, 2.786},
    {"LBGAT", 70.25, 26.73, 6.639},   {"ARREST", 73.05, 24.32, 7.165},
};

// Additional CIFAR-10 rows from the extended comparison table.
constexpr Row kSpotRows10[] = {
    {"DAT", 86.20, 45.38, -1.991},    {"TLA", 86.21, 47.41, -1.282},
    {"CAT", 89.61, 34.78, -1.259},    {"MART", 83.62, 50.98, -0.922},
    {"TRADES", 84.92, 53.08, 1.180},  {"ST", 84.92, 53.54, 1.616},
    {"BagOfTricks", 84.24, 53.88, 1.829},
};

// The full extended CIFAR-10 point set used to approximate the tradeoff
// curve (existing methods plus the phi=30 operating point).
const std::vector<TradeoffPoint> appendix_points10() {
    return {
        {"AT", 87.14, 44.04},    {"DAT", 86.20, 45.38},   {"TLA", 86.21, 47.41},
        {"CAT", 89.61, 34.78},   {"MART", 83.62, 50.98},  {"BAT", 91.20, 29.35},
        {"FS", 90.00, 36.64},    {"AIT", 90.25, 36.45},   {"BS", 85.32, 51.12},
        {"AGKD-BML", 86.25, 50.59}, {"FAT", 89.34, 43.05}, {"SAL", 91.51, 34.22},
        {"IAD", 85.09, 52.29},   {"SAT", 86.84, 50.75},   {"LAT", 87.80, 49.12},
        {"TRADES", 84.92, 53.08}, {"ST", 84.92, 53.54},   {"BoT", 84.24, 53.88},
        {"LAS-AT", 86.23, 53.58}, {"AWP", 85.57, 54.04},  {"S2O", 85.67, 54.10},
        {"LBGAT", 88.22, 52.18}, {"ARREST", 90.24, 50.20},
    };
}

}  // namespace

TEST_CASE("fitting points sampled from a cubic recovers its coefficients") {
    std::vector<TradeoffPoint> pts;
    for (double x : {1.0, 2.0, 3.5, 7.0, 9.0, 11.0}) {
        pts.push_back({"", x, 2 * x * x * x - x + 5});
    }
    const TradeoffCurve c = fit_curve(pts);
    REQUIRE(c.a3 == Catch::Approx(2.0).margin(1e-8));
    REQUIRE(c.a2 == Catch::Approx(0.0).margin(1e-8));
    REQUIRE(c.a1 == Catch::Approx(-1.0).margin(1e-8));
    REQUIRE(c.a0 == Catch::Approx(5.0).margin(1e-8));
    // Residual is zero when the inputs lie exactly on a cubic.
    for (const auto& p : pts)
        REQUIRE(c.eval(p.standard_acc) == Catch::Approx(p.robust_acc).margin(1e-8));
}

TEST_CASE("fit over the extended point set tracks the published curve") {
    const TradeoffCurve fitted = fit_curve(appendix_points10());
    const TradeoffCurve paper = cifar10_tradeoff_curve();
    for (double x : {85.0, 88.0, 90.0})
        REQUIRE(fitted.eval(x) == Catch::Approx(paper.eval(x)).margin(1.0));
}

TEST_CASE("duplicating the whole point set leaves the fit unchanged") {
    auto pts = appendix_points10();
    const TradeoffCurve base = fit_curve(pts);
    auto doubled = pts;
    doubled.insert(doubled.end(), pts.begin(), pts.end());
    const TradeoffCurve twice = fit_curve(doubled);
    REQUIRE(twice.a3 == Catch::Approx(base.a3).margin(1e-9));
    REQUIRE(twice.a2 == Catch::Approx(base.a2).margin(1e-9));
    REQUIRE(twice.a1 == Catch::Approx(base.a1).margin(1e-9));
    REQUIRE(twice.a0 == Catch::Approx(base.a0).margin(1e-9));
}

TEST_CASE("fit rejects too few or rank-deficient inputs") {
    std::vector<TradeoffPoint> three{{"", 1, 1}, {"", 2, 2}, {"", 3, 3}};
    REQUIRE_THROWS_AS(fit_curve(three), Error);
    std::vector<TradeoffPoint> collapsed{{"", 1, 1}, {"", 1, 2}, {"", 2, 3}, {"", 2, 4}, {"", 3, 0}};
    REQUIRE_THROWS_AS(fit_curve(collapsed), Error);
}

TEST_CASE("curve evaluation and derivative") {
    const TradeoffCurve c10 = cifar10_tradeoff_curve();
    // The AT point sits below the curve.
    REQUIRE(44.04 - c10.eval(87.14) < 0.0);

    // Derivative against central differences. The cubic term is tiny, so the
    // truncation error at h = 1e-3 is far below the comparison tolerance.
    for (double x : {84.0, 87.0, 90.5}) {
        const double h = 1e-3;
        const double fd = (c10.eval(x + h) - c10.eval(x - h)) / (2 * h);
        REQUIRE(c10.deriv(x) == Catch::Approx(fd).epsilon(1e-6));
    }

    const TradeoffCurve flat{0, 0, 0, 4.2, 0, 1};
    REQUIRE(flat.eval(17.0) == 4.2);
    REQUIRE(flat.deriv(17.0) == 0.0);
}

TEST_CASE("ardist reproduces the published CIFAR-10 metric values") {
    const TradeoffCurve c = cifar10_tradeoff_curve();
    for (const Row& r : kRows10) {
        INFO(r.label);
        REQUIRE(ardist({r.label, r.p, r.q}, c) == Catch::Approx(r.d).margin(0.005));
    }
}

TEST_CASE("ardist reproduces the recomputed CIFAR-100 metric values") {
    const TradeoffCurve c = cifar100_tradeoff_curve();
    for (const Row& r : kRows100) {
        INFO(r.label);
        REQUIRE(ardist({r.label, r.p, r.q}, c) == Catch::Approx(r.d).margin(0.005));
    }
}

TEST_CASE("ardist spot checks on the extended CIFAR-10 table") {
    const TradeoffCurve c = cifar10_tradeoff_curve();
    for (const Row& r : kSpotRows10) {
        INFO(r.label);
        REQUIRE(ardist({r.label, r.p, r.q}, c) == Catch::Approx(r.d).margin(0.005));
    }
}

TEST_CASE("ardist does not depend on the starting guess within the basin") {
    const TradeoffCurve c10 = cifar10_tradeoff_curve();
    for (const Row& r : kRows10)
        REQUIRE(ardist({r.label, r.p, r.q}, c10, 90.0) ==
                Catch::Approx(ardist({r.label, r.p, r.q}, c10)).margin(1e-6));
    const TradeoffCurve c100 = cifar100_tradeoff_curve();
    for (const Row& r : kRows100)
        REQUIRE(ardist({r.label, r.p, r.q}, c100, 70.0) ==
                Catch::Approx(ardist({r.label, r.p, r.q}, c100)).margin(1e-6));
}

TEST_CASE("a point exactly on the curve has zero distance") {
    const TradeoffCurve c = cifar10_tradeoff_curve();
    for (double x : {84.5, 87.0, 91.0}) {
        const double d = ardist({"on-curve", x, c.eval(x)}, c);
        REQUIRE(std::fabs(d) < 1e-9);
    }
}

TEST_CASE("sign convention and continuity across the curve") {
    const TradeoffCurve c = cifar10_tradeoff_curve();
    const double p = 88.0;
    double prev = 10.0;
    for (double t : {1.0, 0.3, 0.1, 0.01, 1e-4, 1e-7}) {
        const double above = ardist({"above", p, c.eval(p) + t}, c);
        const double below = ardist({"below", p, c.eval(p) - t}, c);
        REQUIRE(above > 0.0);
        REQUIRE(below < 0.0);
        // The normal distance is bounded by the vertical offset and vanishes.
        REQUIRE(std::fabs(above) <= t + 1e-12);
        REQUIRE(std::fabs(below) <= t + 1e-12);
        REQUIRE(std::fabs(above) <= prev);
        prev = std::fabs(above);
    }
}

TEST_CASE("moving a point along the curve normal increases the distance monotonically") {
    // Gentle synthetic cubic.
    const TradeoffCurve c{0.002, -0.3, 2.0, 40.0, 0.0, 20.0};
    const double x0 = 6.0;
    const double y0 = c.eval(x0);
    const double slope = c.deriv(x0);
    const double nx = -slope / std::hypot(slope, 1.0);
    const double ny = 1.0 / std::hypot(slope, 1.0);
    double prev = 0.0;
    for (double t : {0.2, 0.5, 1.0, 1.5, 2.5}) {
        const double d = ardist({"n", x0 + t * nx, y0 + t * ny}, c);
        REQUIRE(d > prev);
        REQUIRE(d == Catch::Approx(t).margin(0.05));
        prev = d;
    }
}

TEST_CASE("ardist errors on degenerate normals") {
    const TradeoffCurve flat{0, 0, 0, 10.0, 0, 1};
    REQUIRE_THROWS_AS(ardist({"x", 5.0, 12.0}, flat), Error);
}

TEST_CASE("sum metric") {
    REQUIRE(std::round(sum_metric({"AT", 87.14, 44.04}) * 100) / 100 == 131.18);
    REQUIRE(sum_metric({"zero", 0, 0}) == 0.0);
    REQUIRE(std::round(sum_metric({"LBGAT", 70.25, 26.73}) * 100) / 100 == 96.98);
}

TEST_CASE("mean cosine similarity of a model with itself is 1") {
    Dataset ds = make_synthetic_images(5, 4, 1, 28, 28, 3);
    Model m = Model::build("small-mlp", 4, 1, 7);
    REQUIRE(mean_cosine_similarity(m, m, ds) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("negating the representation layer flips the similarity to -1") {
    Dataset ds = make_synthetic_images(5, 4, 1, 28, 28, 4);
    Model a = Model::build("small-mlp", 4, 1, 8);
    Model b = a.clone_trainable();
    Tensor& w = b.param("fc2.w").mutable_value();
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = -w[i];
    Tensor& bias = b.param("fc2.b").mutable_value();
    for (std::int64_t i = 0; i < bias.size(); ++i) bias[i] = -bias[i];
    REQUIRE(mean_cosine_similarity(a, b, ds) == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("mean cosine similarity matches a per-example oracle") {
    Dataset ds = make_synthetic_images(4, 3, 1, 28, 28, 5);
    Model a = Model::build("small-mlp", 3, 1, 9);
    Model b = Model::build("small-mlp", 3, 1, 10);
    const double got = mean_cosine_similarity(a, b, ds);

    Var x = Var::constant(ds.images);
    const Tensor ra = a.represent(x).value();
    const Tensor rb = b.represent(x).value();
    double want = 0.0;
    for (int r = 0; r < ds.n(); ++r) {
        double uv = 0, uu = 0, vv = 0;
        for (int j = 0; j < 128; ++j) {
            uv += ra[r * 128 + j] * rb[r * 128 + j];
            uu += ra[r * 128 + j] * ra[r * 128 + j];
            vv += rb[r * 128 + j] * rb[r * 128 + j];
        }
        want += uv / (std::sqrt(uu) * std::sqrt(vv));
    }
    want /= ds.n();
    REQUIRE(got == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("zero-norm representation rows are skipped and bounded") {
    Tensor a({3, 2}, {1, 0, 0, 0, 0, 1});
    Tensor b({3, 2}, {1, 0, 1, 1, 0, 1});
    const CosineStats st = mean_cosine_rows(a, b);
    REQUIRE(st.used == 2);
    REQUIRE(st.skipped == 1);
    REQUIRE(st.mean == Catch::Approx(1.0).margin(1e-12));

    // All representations collapse to zero -> more than 1% skipped -> error.
    Dataset ds = make_synthetic_images(4, 3, 1, 28, 28, 6);
    Model m = Model::build("small-mlp", 3, 1, 11);
    Model z = m.clone_trainable();
    Tensor& w = z.param("fc2.w").mutable_value();
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    Tensor& bias = z.param("fc2.b").mutable_value();
    for (std::int64_t i = 0; i < bias.size(); ++i) bias[i] = 0.0;
    REQUIRE_THROWS_AS(mean_cosine_similarity(m, z, ds), Error);
}

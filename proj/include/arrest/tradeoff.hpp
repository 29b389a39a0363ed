#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "arrest/data.hpp"
#include "arrest/errors.hpp"
#include "arrest/model.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

struct TradeoffPoint {
    std::string label;
    double standard_acc = 0.0;  // percent
    double robust_acc = 0.0;    // percent
};

// f(x) = a3 x^3 + a2 x^2 + a1 x + a0, with the abscissa range of the fitted
// points kept as a domain hint.
struct TradeoffCurve {
    double a3 = 0.0, a2 = 0.0, a1 = 0.0, a0 = 0.0;
    double x_min = 0.0, x_max = 100.0;

    double eval(double x) const { return ((a3 * x + a2) * x + a1) * x + a0; }
    double deriv(double x) const { return (3.0 * a3 * x + 2.0 * a2) * x + a1; }
    double deriv2(double x) const { return 6.0 * a3 * x + 2.0 * a2; }
};

// Published tradeoff curves, usable without refitting.
inline TradeoffCurve cifar10_tradeoff_curve() {
    return {9.877e-05, -0.3922, 63.82, -2600.0, 83.0, 92.0};
}
inline TradeoffCurve cifar100_tradeoff_curve() {
    return {5.615e-04, -0.1582, 12.44, -271.8, 56.0, 74.0};
}

inline double sum_metric(const TradeoffPoint& p) { return p.standard_acc + p.robust_acc; }

// ---------------------------------------------------------------------------
// Least-squares cubic fit via normal equations on a centered, scaled abscissa.
// Duplicated points simply count twice.

inline TradeoffCurve fit_curve(const std::vector<TradeoffPoint>& points) {
    if (points.size() < 4) throw domain_error("fit_curve: need at least 4 points");
    std::vector<double> xs;
    for (const auto& p : points) xs.push_back(p.standard_acc);
    {
        std::vector<double> d = xs;
        std::sort(d.begin(), d.end());
        d.erase(std::unique(d.begin(), d.end()), d.end());
        if (d.size() < 4)
            throw domain_error("fit_curve: need at least 4 distinct standard-accuracy values");
    }

    const std::size_t n = points.size();
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double scale = std::sqrt(var / static_cast<double>(n));
    if (scale == 0.0) throw domain_error("fit_curve: degenerate abscissa");

    // Normal equations for z^0..z^3 with z = (x-mean)/scale.
    std::array<std::array<double, 4>, 4> ata{};
    std::array<double, 4> aty{};
    for (std::size_t i = 0; i < n; ++i) {
        const double z = (xs[i] - mean) / scale;
        std::array<double, 4> row{1.0, z, z * z, z * z * z};
        for (int r = 0; r < 4; ++r) {
            aty[static_cast<std::size_t>(r)] += row[static_cast<std::size_t>(r)] * points[i].robust_acc;
            for (int c = 0; c < 4; ++c)
                ata[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] +=
                    row[static_cast<std::size_t>(r)] * row[static_cast<std::size_t>(c)];
        }
    }

    // Gaussian elimination with partial pivoting.
    std::array<std::array<double, 5>, 4> m{};
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) m[r][c] = ata[r][c];
        m[r][4] = aty[r];
    }
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
        if (std::fabs(m[pivot][col]) < 1e-12)
            throw domain_error("fit_curve: rank-deficient normal equations");
        std::swap(m[col], m[pivot]);
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double k = m[r][col] / m[col][col];
            for (int c = col; c < 5; ++c) m[r][c] -= k * m[col][c];
        }
    }
    std::array<double, 4> cz{};  // coefficients of z^0..z^3
    for (int r = 0; r < 4; ++r) cz[static_cast<std::size_t>(r)] = m[r][4] / m[r][r];

    // Map back to raw units: f(x) = sum_k cz[k] ((x-mean)/scale)^k.
    const double s1 = scale, s2 = scale * scale, s3 = s2 * scale;
    TradeoffCurve curve;
    curve.a3 = cz[3] / s3;
    curve.a2 = cz[2] / s2 - 3.0 * cz[3] * mean / s3;
    curve.a1 = cz[1] / s1 - 2.0 * cz[2] * mean / s2 + 3.0 * cz[3] * mean * mean / s3;
    curve.a0 = cz[0] - cz[1] * mean / s1 + cz[2] * mean * mean / s2 - cz[3] * mean * mean * mean / s3;
    curve.x_min = *std::min_element(xs.begin(), xs.end());
    curve.x_max = *std::max_element(xs.begin(), xs.end());
    return curve;
}

// ---------------------------------------------------------------------------
// Signed normal distance from a point to the curve. Solves
//   h(x) = q - f(x) + (p - x)/f'(x) = 0
// by Newton iteration with a bracketing/bisection safeguard, then returns
// sign(q - f(p)) * sqrt((p-x*)^2 + (q-f(x*))^2).

namespace detail {

struct NormalEquation {
    const TradeoffCurve& curve;
    double p, q;

    double h(double x) const { return q - curve.eval(x) + (p - x) / curve.deriv(x); }

    double h_prime(double x) const {
        const double d = curve.deriv(x);
        return -d - 1.0 / d - (p - x) * curve.deriv2(x) / (d * d);
    }
};

inline double solve_normal_equation(const NormalEquation& eq, double x0) {
    constexpr double kTol = 1e-10;
    constexpr int kMaxIter = 200;

    // Plain Newton from the guess.
    double x = x0;
    for (int it = 0; it < kMaxIter; ++it) {
        const double hx = eq.h(x);
        if (std::fabs(hx) < kTol) return x;
        const double hp = eq.h_prime(x);
        if (!std::isfinite(hx) || !std::isfinite(hp) || hp == 0.0) break;
        const double xn = x - hx / hp;
        if (!std::isfinite(xn) || std::fabs(xn - x0) > 1e4) break;
        x = xn;
    }
    if (std::fabs(eq.h(x)) < kTol) return x;

    // Safeguard: expand around the guess until h changes sign, then bisect.
    double lo = 0.0, hi = 0.0;
    bool found = false;
    const double radii[] = {0.25, 0.5, 1, 2, 4, 8, 16, 32, 64};
    for (int side = 0; side < 2 && !found; ++side) {
        double prev_x = x0, prev_h = eq.h(x0);
        for (double r : radii) {
            const double cand = side == 0 ? x0 + r : x0 - r;
            const double hc = eq.h(cand);
            if (std::isfinite(prev_h) && std::isfinite(hc) && prev_h * hc < 0.0) {
                lo = std::min(prev_x, cand);
                hi = std::max(prev_x, cand);
                found = true;
                break;
            }
            prev_x = cand;
            prev_h = hc;
        }
    }
    if (!found)
        throw domain_error("ardist: root finder failed to bracket a solution (residual " +
                           std::to_string(eq.h(x0)) + ")");

    double flo = eq.h(lo);
    for (int it = 0; it < kMaxIter; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fmid = eq.h(mid);
        if (std::fabs(fmid) < kTol) return mid;
        if (flo * fmid < 0.0) {
            hi = mid;
        } else {
            lo = mid;
            flo = fmid;
        }
    }
    const double mid = 0.5 * (lo + hi);
    if (std::fabs(eq.h(mid)) < kTol) return mid;
    throw domain_error("ardist: no convergence within iteration budget (residual " +
                       std::to_string(eq.h(mid)) + ")");
}

}  // namespace detail

// guess defaults to the point's standard accuracy.
inline double ardist(const TradeoffPoint& point, const TradeoffCurve& curve,
                     double guess = std::numeric_limits<double>::quiet_NaN()) {
    const double p = point.standard_acc, q = point.robust_acc;
    const double x0 = std::isnan(guess) ? p : guess;
    if (curve.deriv(x0) == 0.0)
        throw domain_error("ardist: curve derivative vanishes at the starting guess");
    const detail::NormalEquation eq{curve, p, q};
    const double xs = detail::solve_normal_equation(eq, x0);
    if (std::fabs(curve.deriv(xs)) < 1e-12)
        throw domain_error("ardist: degenerate normal (f' = 0 at the foot point)");
    const double dy = q - curve.eval(p);
    const double sign = dy > 0.0 ? 1.0 : (dy < 0.0 ? -1.0 : 0.0);
    return sign * std::hypot(p - xs, q - curve.eval(xs));
}

// ---------------------------------------------------------------------------
// Representation similarity (cosine between two models' clean-input
// representations, averaged over a dataset).

struct CosineStats {
    double mean = 0.0;
    int used = 0;
    int skipped = 0;  // zero-norm rows
};

inline CosineStats mean_cosine_rows(const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape()) || a.rank() != 2)
        throw shape_error("mean_cosine_rows: expects matching (N,D) matrices");
    const int n = a.dim(0), d = a.dim(1);
    CosineStats st;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        double uv = 0.0, uu = 0.0, vv = 0.0;
        for (int j = 0; j < d; ++j) {
            uv += a[i * d + j] * b[i * d + j];
            uu += a[i * d + j] * a[i * d + j];
            vv += b[i * d + j] * b[i * d + j];
        }
        if (uu == 0.0 || vv == 0.0) {
            ++st.skipped;
            continue;
        }
        sum += std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
        ++st.used;
    }
    st.mean = st.used > 0 ? sum / st.used : 0.0;
    return st;
}

inline double mean_cosine_similarity(const Model& model_a, const Model& model_b,
                                     const Dataset& ds, int batch_size = 256) {
    if (model_a.arch().rep_dim != model_b.arch().rep_dim)
        throw shape_error("mean_cosine_similarity: representation widths differ");
    double sum = 0.0;
    int used = 0, skipped = 0;
    for (int start = 0; start < ds.n(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.n(), start + batch_size); ++i) idx.push_back(i);
        auto [x, y] = gather_batch(ds, idx);
        Var xv = Var::constant(std::move(x));
        const CosineStats st = mean_cosine_rows(model_a.represent(xv).value(),
                                                model_b.represent(xv).value());
        sum += st.mean * st.used;
        used += st.used;
        skipped += st.skipped;
    }
    if (skipped > 0 && skipped * 100 > ds.n())
        throw domain_error("mean_cosine_similarity: more than 1% of representations were zero");
    if (used == 0) throw domain_error("mean_cosine_similarity: no usable rows");
    return sum / used;
}

}  // namespace arrest

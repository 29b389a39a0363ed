#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "arrest/autodiff.hpp"
#include "arrest/errors.hpp"
#include "arrest/model.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

enum class DistanceKind { angular, mse, mae };
enum class KdVariant { rgkd, logit, attention, none };

inline std::string to_string(DistanceKind k) {
    switch (k) {
        case DistanceKind::angular: return "angular";
        case DistanceKind::mse: return "mse";
        case DistanceKind::mae: return "mae";
    }
    return "?";
}

inline DistanceKind distance_from_string(const std::string& s) {
    if (s == "angular") return DistanceKind::angular;
    if (s == "mse") return DistanceKind::mse;
    if (s == "mae") return DistanceKind::mae;
    throw config_error("unknown distance '" + s + "' (expected angular|mse|mae)");
}

inline std::string to_string(KdVariant v) {
    switch (v) {
        case KdVariant::rgkd: return "rgkd";
        case KdVariant::logit: return "logit";
        case KdVariant::attention: return "attention";
        case KdVariant::none: return "none";
    }
    return "?";
}

inline KdVariant kd_variant_from_string(const std::string& s) {
    if (s == "rgkd") return KdVariant::rgkd;
    if (s == "logit") return KdVariant::logit;
    if (s == "attention") return KdVariant::attention;
    if (s == "none") return KdVariant::none;
    throw config_error("unknown kd variant '" + s + "' (expected rgkd|logit|attention|none)");
}

struct LossConfig {
    KdVariant kd_variant = KdVariant::rgkd;
    DistanceKind distance = DistanceKind::angular;
    double lambda = 50.0;

    static double default_lambda(KdVariant v) {
        switch (v) {
            case KdVariant::rgkd: return 50.0;
            case KdVariant::logit: return 1.0;
            case KdVariant::attention: return 2.0;
            case KdVariant::none: return 0.0;
        }
        return 0.0;
    }

    static LossConfig make(KdVariant v, DistanceKind d = DistanceKind::angular) {
        return LossConfig{v, d, default_lambda(v)};
    }
};

// ---------------------------------------------------------------------------
// Plain vector distances (the elementary operations; batch forms below).

inline double angular_distance(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size() || u.empty())
        throw shape_error("angular_distance: vectors must have equal nonzero length");
    double uv = 0.0, uu = 0.0, vv = 0.0;
    bool equal = true;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        equal = equal && u[i] == v[i];
    }
    if (uu == 0.0 || vv == 0.0) throw domain_error("angular_distance: zero vector");
    if (equal) return 0.0;  // exact, independent of rounding in the norms
    // |cos| can land a rounding error outside [0,1]; clamp to keep the range.
    const double c = std::min(1.0, std::fabs(uv) / (std::sqrt(uu) * std::sqrt(vv)));
    return 1.0 - c;
}

inline double mse_distance(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size() || u.empty())
        throw shape_error("mse_distance: vectors must have equal nonzero length");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
    return s / static_cast<double>(u.size());
}

inline double mae_distance(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size() || u.empty())
        throw shape_error("mae_distance: vectors must have equal nonzero length");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += std::fabs(u[i] - v[i]);
    return s / static_cast<double>(u.size());
}

// ---------------------------------------------------------------------------
// Differentiable batch forms. u, v: (N,D); result: scalar, mean over rows.

inline Var distance_batch(DistanceKind kind, const Var& u, const Var& v) {
    detail::require_same_shape("distance_batch", u.value(), v.value());
    if (u.value().rank() != 2) throw shape_error("distance_batch: expects (N,D) operands");
    switch (kind) {
        case DistanceKind::angular: {
            Var un = rows_norm(u);
            Var vn = rows_norm(v);
            for (std::int64_t i = 0; i < un.value().size(); ++i)
                if (un.value()[i] == 0.0 || vn.value()[i] == 0.0)
                    throw domain_error("angular_distance: zero vector in row " + std::to_string(i));
            Var cosabs = vclamp(div(vabs(rows_dot(u, v)), mul(un, vn)), 0.0, 1.0);
            return reduce_mean(affine(cosabs, -1.0, 1.0));
        }
        case DistanceKind::mse: {
            Var d = sub(u, v);
            return reduce_mean(mul(d, d));
        }
        case DistanceKind::mae:
            return reduce_mean(vabs(sub(u, v)));
    }
    throw domain_error("distance_batch: bad kind");
}

// Mean over the batch of -log softmax(logits)[y].
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor& L = logits.value();
    if (L.rank() != 2) throw shape_error("cross_entropy: logits must be (N,K)");
    const int n = L.dim(0), k = L.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw shape_error("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(n) + " rows");
    Tensor onehot({n, k});
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw domain_error("cross_entropy: label " + std::to_string(labels[i]) +
                               " out of range [0," + std::to_string(k) + ") at row " +
                               std::to_string(i));
        onehot[i * k + labels[i]] = 1.0;
    }
    Var picked = mul(log_softmax(logits), Var::constant(std::move(onehot)));
    return affine(reduce_sum(picked), -1.0 / n, 0.0);
}

namespace detail {

inline Tensor add_tensors(const Tensor& x, const Tensor& delta) {
    require_same_shape("perturb", x, delta);
    Tensor out = x;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += delta[i];
    return out;
}

inline void require_frozen_teacher(const Model& teacher, const char* where) {
    if (!teacher.frozen())
        throw state_error(std::string(where) + ": teacher model must be frozen");
}

}  // namespace detail

// L2-normalized channel-absolute-sum of a spatial feature map: (N,C,H,W) -> (N,H*W).
inline Var attention_map(const Var& spatial) {
    const Tensor& S = spatial.value();
    if (S.rank() != 4) throw shape_error("attention_map: expects (N,C,H,W)");
    const int n = S.dim(0), c = S.dim(1), hw = S.dim(2) * S.dim(3);
    Var flat = reshape(vabs(spatial), {n, c, hw});
    Var f = sum_channels(flat);
    Var norms = rows_norm(f);
    for (std::int64_t i = 0; i < norms.value().size(); ++i)
        if (norms.value()[i] == 0.0)
            throw domain_error("attention_map: zero-norm map in row " + std::to_string(i));
    return div_rows(f, norms);
}

// d(h(x+delta; student), h(x; teacher)), mean over the batch. Gradients flow
// only into the student; the teacher must be frozen.
inline Var rgkd_loss(const Model& student, const Model& teacher, const Tensor& x,
                     const Tensor& delta, DistanceKind kind = DistanceKind::angular) {
    detail::require_frozen_teacher(teacher, "rgkd_loss");
    Var x_adv = Var::constant(detail::add_tensors(x, delta));
    Var x_clean = Var::constant(x);
    return distance_batch(kind, student.represent(x_adv), teacher.represent(x_clean));
}

// d(f(x+delta; student), f(x; teacher)) on logits.
inline Var logit_kd_loss(const Model& student, const Model& teacher, const Tensor& x,
                         const Tensor& delta, DistanceKind kind = DistanceKind::angular) {
    detail::require_frozen_teacher(teacher, "logit_kd_loss");
    Var x_adv = Var::constant(detail::add_tensors(x, delta));
    Var x_clean = Var::constant(x);
    return distance_batch(kind, student.forward(x_adv), teacher.forward(x_clean));
}

// Distance between attention maps of the pre-pool feature tensors. Only
// architectures with a spatial representation support this.
inline Var attention_kd_loss(const Model& student, const Model& teacher, const Tensor& x,
                             const Tensor& delta, DistanceKind kind = DistanceKind::angular) {
    detail::require_frozen_teacher(teacher, "attention_kd_loss");
    Var x_adv = Var::constant(detail::add_tensors(x, delta));
    Var x_clean = Var::constant(x);
    Var at_s = attention_map(student.represent_spatial(x_adv));
    Var at_t = attention_map(teacher.represent_spatial(x_clean));
    return distance_batch(kind, at_s, at_t);
}

// L_CE(f(x+delta), y) + lambda * L_kd. With lambda = 0 (or variant none) the
// distillation term is skipped entirely.
inline Var combined_loss(const Model& student, const Model* teacher, const Tensor& x,
                         const Tensor& delta, const std::vector<int>& labels,
                         const LossConfig& cfg) {
    Var x_adv = Var::constant(detail::add_tensors(x, delta));
    if (cfg.lambda < 0.0) throw domain_error("combined_loss: lambda must be >= 0");

    if (cfg.kd_variant == KdVariant::none || cfg.lambda == 0.0)
        return cross_entropy(student.forward(x_adv), labels);

    if (teacher == nullptr) throw state_error("combined_loss: kd variant requires a teacher");
    detail::require_frozen_teacher(*teacher, "combined_loss");
    Var x_clean = Var::constant(x);

    Var ce, kd;
    switch (cfg.kd_variant) {
        case KdVariant::rgkd: {
            Var rep_adv = student.represent(x_adv);
            ce = cross_entropy(student.head(rep_adv), labels);
            kd = distance_batch(cfg.distance, rep_adv, teacher->represent(x_clean));
            break;
        }
        case KdVariant::logit: {
            Var logits_adv = student.forward(x_adv);
            ce = cross_entropy(logits_adv, labels);
            kd = distance_batch(cfg.distance, logits_adv, teacher->forward(x_clean));
            break;
        }
        case KdVariant::attention: {
            Var spatial_adv = student.represent_spatial(x_adv);
            ce = cross_entropy(student.head(global_avg_pool(spatial_adv)), labels);
            kd = distance_batch(cfg.distance, attention_map(spatial_adv),
                                attention_map(teacher->represent_spatial(x_clean)));
            break;
        }
        case KdVariant::none:
            break;  // handled above
    }
    return add(ce, affine(kd, cfg.lambda, 0.0));
}

// 0.5 * L_CE(f(x+delta), y) + 0.5 * L_CE(f(x), y).
inline Var rst_combined_ce(const Model& model, const Tensor& x, const Tensor& delta,
                           const std::vector<int>& labels) {
    Var ce_adv = cross_entropy(model.forward(Var::constant(detail::add_tensors(x, delta))), labels);
    Var ce_clean = cross_entropy(model.forward(Var::constant(x)), labels);
    return add(affine(ce_adv, 0.5, 0.0), affine(ce_clean, 0.5, 0.0));
}

}  // namespace arrest

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arrest/autodiff.hpp"
#include "arrest/errors.hpp"
#include "arrest/loss.hpp"
#include "arrest/model.hpp"
#include "arrest/rng.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

// L-infinity attack parameters in normalized pixel units.
struct AttackSpec {
    double epsilon = 8.0 / 255.0;
    double step_size = 2.0 / 255.0;
    int steps = 10;
    double clamp_lo = 0.0;
    double clamp_hi = 1.0;
    bool random_start = true;

    void validate() const {
        if (epsilon < 0.0) throw domain_error("attack: epsilon must be >= 0");
        if (steps > 0 && step_size <= 0.0)
            throw domain_error("attack: step_size must be > 0 when steps > 0");
        if (!(clamp_lo < clamp_hi)) throw domain_error("attack: clamp_lo must be < clamp_hi");
    }
};

// Objective used to obtain input gradients; defaults to cross-entropy of the
// model's logits. x_adv is the perturbed input leaf.
using AttackLoss =
    std::function<Var(const Model& model, const Var& x_adv, const std::vector<int>& labels)>;

namespace detail {

inline Var default_attack_loss(const Model& m, const Var& x_adv, const std::vector<int>& y) {
    return cross_entropy(m.forward(x_adv), y);
}

}  // namespace detail

// Componentwise projection of delta onto {||d||_inf <= eps} intersected with
// {x + d in [lo, hi]}. Exact and idempotent for axis-aligned boxes.
inline void project_linf(std::vector<double>& delta, const Tensor& x, const AttackSpec& spec) {
    const auto& xv = x.values();
    for (std::size_t i = 0; i < delta.size(); ++i) {
        double d = delta[i];
        d = std::min(spec.epsilon, std::max(-spec.epsilon, d));
        d = std::min(spec.clamp_hi - xv[i], std::max(spec.clamp_lo - xv[i], d));
        delta[i] = d;
    }
}

// Single-step sign attack: eps * sign(grad_x loss), adjusted into the clamp box.
inline Tensor fgsm(const Model& model, const Tensor& x, const std::vector<int>& labels,
                   const AttackSpec& spec, const AttackLoss& loss = {}) {
    spec.validate();
    const Model frozen = model.frozen() ? model : model.clone_frozen();
    const AttackLoss& fn = loss ? loss : detail::default_attack_loss;

    Var xv = Var::leaf(x, /*requires_grad=*/true);
    fn(frozen, xv, labels).backward();
    const std::vector<double>& g = xv.grad();

    Tensor delta(x.shape());
    for (std::int64_t i = 0; i < delta.size(); ++i) {
        const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
        delta[i] = spec.epsilon * s;
    }
    project_linf(delta.values(), x, spec);
    return delta;
}

// Iterated projected sign ascent. row_seeds supplies one stream per example
// for the random start, which keeps the result independent of how the batch
// was split across calls.
inline Tensor pgd_seeded(const Model& model, const Tensor& x, const std::vector<int>& labels,
                         const AttackSpec& spec, const std::vector<std::uint64_t>& row_seeds,
                         const AttackLoss& loss = {}) {
    spec.validate();
    if (spec.steps < 1) throw domain_error("pgd: steps must be >= 1");
    if (x.rank() < 1) throw shape_error("pgd: input must be a batch");
    const int n = x.dim(0);
    if (static_cast<int>(row_seeds.size()) != n)
        throw shape_error("pgd: need one seed per row");
    const std::int64_t row = x.size() / n;

    const Model frozen = model.frozen() ? model : model.clone_frozen();
    const AttackLoss& fn = loss ? loss : detail::default_attack_loss;

    Tensor delta(x.shape());
    if (spec.random_start) {
        for (int i = 0; i < n; ++i) {
            Rng row_rng(row_seeds[static_cast<std::size_t>(i)]);
            for (std::int64_t j = 0; j < row; ++j)
                delta[i * row + j] = row_rng.uniform(-spec.epsilon, spec.epsilon);
        }
    }
    project_linf(delta.values(), x, spec);

    for (int step = 0; step < spec.steps; ++step) {
        Tensor x_adv = x;
        for (std::int64_t i = 0; i < x_adv.size(); ++i) x_adv[i] += delta[i];
        Var xv = Var::leaf(std::move(x_adv), /*requires_grad=*/true);
        fn(frozen, xv, labels).backward();
        const std::vector<double>& g = xv.grad();
        for (std::int64_t i = 0; i < delta.size(); ++i) {
            const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            delta[i] += spec.step_size * s;
        }
        project_linf(delta.values(), x, spec);
    }
    return delta;
}

inline Tensor pgd(const Model& model, const Tensor& x, const std::vector<int>& labels,
                  const AttackSpec& spec, Rng& rng, const AttackLoss& loss = {}) {
    const int n = x.dim(0);
    const std::uint64_t base = rng.next_u64();
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) seeds[static_cast<std::size_t>(i)] = mix_seed(base, static_cast<std::uint64_t>(i));
    return pgd_seeded(model, x, labels, spec, seeds, loss);
}

// i.i.d. components uniform on [-eps, eps]. Clamping into the valid input box
// is the caller's responsibility after adding to x.
inline Tensor uniform_noise(const std::vector<int>& shape, double epsilon, Rng& rng) {
    if (epsilon < 0.0) throw domain_error("uniform_noise: epsilon must be >= 0");
    Tensor delta(shape);
    for (std::int64_t i = 0; i < delta.size(); ++i)
        delta[i] = rng.uniform(-epsilon, epsilon);
    return delta;
}

}  // namespace arrest

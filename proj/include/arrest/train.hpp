#pragma once

#include <cmath>
#include <numbers>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "arrest/attack.hpp"
#include "arrest/data.hpp"
#include "arrest/errors.hpp"
#include "arrest/loss.hpp"
#include "arrest/model.hpp"
#include "arrest/rng.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

// ---------------------------------------------------------------------------
// Learning-rate schedules. Piecewise constant, 1-indexed epochs. Transition
// points defined at reference scale move proportionally with the epoch count
// (rounded to nearest, minimum 1).

struct LrSchedule {
    std::vector<double> rates;  // rates[e-1] is the rate for epoch e

    double rate(int epoch) const {
        if (epoch < 1) throw domain_error("lr schedule: epoch must be >= 1");
        const std::size_t i = std::min(rates.size() - 1, static_cast<std::size_t>(epoch - 1));
        return rates[i];
    }
};

inline LrSchedule make_lr_schedule(const std::string& kind, int epochs, double base_rate = 0.0) {
    if (epochs < 1) throw domain_error("lr schedule: need at least 1 epoch");
    LrSchedule s;
    s.rates.assign(static_cast<std::size_t>(epochs), 0.0);

    auto scaled = [epochs](int t, int reference) {
        return std::max(1, static_cast<int>(std::lround(static_cast<double>(t) * epochs / reference)));
    };

    if (kind == "constant") {
        if (base_rate <= 0.0) throw config_error("constant lr schedule needs a positive rate");
        for (auto& r : s.rates) r = base_rate;
        return s;
    }
    if (kind == "pretrain-paper") {
        // 0.1, x0.1 at epochs 75 and 90 of a 100-epoch run
        const double r0 = base_rate > 0.0 ? base_rate : 0.1;
        for (int e = 1; e <= epochs; ++e) {
            double r = r0;
            if (e >= scaled(75, 100)) r = r0 * 0.1;
            if (e >= scaled(90, 100)) r = r0 * 0.01;
            s.rates[static_cast<std::size_t>(e - 1)] = r;
        }
        return s;
    }
    if (kind == "aft-paper") {
        // 0.025 -> 0.02 at epoch 11 of 20, then halved every two epochs
        const double r0 = base_rate > 0.0 ? base_rate : 0.025;
        const double r1 = r0 * 0.8;
        for (int e = 1; e <= epochs; ++e) {
            double r = r0;
            if (e >= scaled(11, 20)) r = r1;
            for (int j = 1;; ++j) {
                const int t = 11 + 2 * j;
                const int ts = scaled(t, 20);
                if (ts > epochs || ts > e) break;
                r = r1 * std::pow(0.5, j);
            }
            s.rates[static_cast<std::size_t>(e - 1)] = r;
        }
        return s;
    }
    throw config_error("unknown lr schedule kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// SGD with classical momentum; weight decay folded into the gradient.

class SgdOptimizer {
public:
    SgdOptimizer(const Model& m, double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : m.params())
            velocity_.emplace_back(static_cast<std::size_t>(p.var.value().size()), 0.0);
    }

    void step(Model& m, double lr) {
        if (m.frozen()) throw state_error("optimizer: refusing to update a frozen model");
        auto& params = m.params();
        for (std::size_t t = 0; t < params.size(); ++t) {
            Tensor& theta = params[t].var.mutable_value();
            const std::vector<double>& g = params[t].var.grad();
            std::vector<double>& v = velocity_[t];
            for (std::int64_t i = 0; i < theta.size(); ++i) {
                const double grad = g[static_cast<std::size_t>(i)] + weight_decay_ * theta[i];
                v[static_cast<std::size_t>(i)] = momentum_ * v[static_cast<std::size_t>(i)] + grad;
                theta[i] -= lr * v[static_cast<std::size_t>(i)];
            }
        }
    }

private:
    double momentum_;
    double weight_decay_;
    std::vector<std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------
// Specs and reports

struct TrainSpec {
    int epochs = 10;
    int batch_size = 64;
    std::string lr_kind = "constant";
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;

    double lambda = 50.0;
    DistanceKind distance = DistanceKind::angular;
    KdVariant kd_variant = KdVariant::rgkd;

    double phi_degrees = 30.0;  // tau = 1 - cos(phi)
    double tau_override = -1.0; // >= 0 takes precedence over phi
    int nr_window = -1;         // < 0 -> ceil(epochs / 2)

    AttackSpec attack;
    std::uint64_t seed = 0;
    bool strict_nr = false;  // skip PGD for switched rows; output must match
    bool hflip = false;

    double tau() const {
        if (tau_override >= 0.0) {
            if (tau_override <= 0.0) throw domain_error("tau must be > 0");
            return tau_override;
        }
        if (!(phi_degrees > 0.0 && phi_degrees < 90.0))
            throw domain_error("phi must lie in (0, 90) degrees");
        return 1.0 - std::cos(phi_degrees * std::numbers::pi / 180.0);
    }

    int effective_nr_window() const {
        const int w = nr_window < 0 ? (epochs + 1) / 2 : nr_window;
        if (w > epochs) throw domain_error("nr_window exceeds epoch count");
        return w;
    }
};

struct EpochReport {
    int epoch = 0;
    double mean_loss = 0.0;
    double standard_acc = std::numeric_limits<double>::quiet_NaN();
    double robust_acc = std::numeric_limits<double>::quiet_NaN();
    double nr_switch_rate = std::numeric_limits<double>::quiet_NaN();  // NaN = not applicable
    double mean_rep_distance = std::numeric_limits<double>::quiet_NaN();
};

// Per-example gating record used to verify the noisy-replay trace.
struct NrTraceEvent {
    int epoch = 0;
    int step = 0;
    int row = 0;            // position in batch
    int dataset_index = 0;  // index into the training set
    double drift = std::numeric_limits<double>::quiet_NaN();
    bool nr_active = false;
    bool switched = false;
};

struct TrainHooks {
    std::function<void(const EpochReport&)> on_epoch;
    std::function<void(const NrTraceEvent&)> on_nr_event;
};

// ---------------------------------------------------------------------------
// Evaluation

inline double standard_accuracy(const Model& m, const Dataset& ds, int batch_size = 256) {
    int correct = 0;
    for (int start = 0; start < ds.n(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.n(), start + batch_size); ++i) idx.push_back(i);
        auto [x, y] = gather_batch(ds, idx);
        const Tensor logits = m.forward(Var::constant(std::move(x))).value();
        for (std::size_t r = 0; r < y.size(); ++r)
            if (argmax_row(logits, static_cast<int>(r)) == y[r]) ++correct;
    }
    return 100.0 * correct / ds.n();
}

enum class EvalAttack { none, fgsm, pgd };

inline EvalAttack eval_attack_from_string(const std::string& s) {
    if (s == "none") return EvalAttack::none;
    if (s == "fgsm") return EvalAttack::fgsm;
    if (s == "pgd") return EvalAttack::pgd;
    throw config_error("unknown attack '" + s + "' (expected none|fgsm|pgd)");
}

inline double robust_accuracy(const Model& m, const Dataset& ds, const AttackSpec& spec,
                              EvalAttack kind, std::uint64_t seed, int batch_size = 128) {
    if (kind == EvalAttack::none) return standard_accuracy(m, ds, batch_size);
    const Model frozen = m.frozen() ? m : m.clone_frozen();
    int correct = 0;
    for (int start = 0; start < ds.n(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.n(), start + batch_size); ++i) idx.push_back(i);
        auto [x, y] = gather_batch(ds, idx);
        Tensor delta;
        if (kind == EvalAttack::fgsm) {
            delta = fgsm(frozen, x, y, spec);
        } else {
            std::vector<std::uint64_t> seeds;
            for (int i : idx) seeds.push_back(mix_seed(seed, 0x6576616cULL, static_cast<std::uint64_t>(i)));
            delta = pgd_seeded(frozen, x, y, spec, seeds);
        }
        for (std::int64_t i = 0; i < x.size(); ++i) x[i] += delta[i];
        const Tensor logits = frozen.forward(Var::constant(std::move(x))).value();
        for (std::size_t r = 0; r < y.size(); ++r)
            if (argmax_row(logits, static_cast<int>(r)) == y[r]) ++correct;
    }
    return 100.0 * correct / ds.n();
}

// ---------------------------------------------------------------------------
// Trainers

namespace detail {

inline std::uint64_t attack_row_seed(std::uint64_t seed, int epoch, int step, int row) {
    return mix_seed(mix_seed(seed, 0x61747461636bULL),
                    static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                    static_cast<std::uint64_t>(row));
}

inline std::uint64_t noise_row_seed(std::uint64_t seed, int epoch, int step, int row) {
    return mix_seed(mix_seed(seed, 0x6e6f697365ULL),
                    static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                    static_cast<std::uint64_t>(row));
}

inline void maybe_hflip(Tensor& x, const TrainSpec& spec, int epoch, int step) {
    if (!spec.hflip) return;
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (int r = 0; r < n; ++r) {
        Rng rng(mix_seed(mix_seed(spec.seed, 0x666c6970ULL), static_cast<std::uint64_t>(epoch),
                         static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(r)));
        if (rng.uniform() >= 0.5) continue;
        for (int ch = 0; ch < c; ++ch)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w / 2; ++xx) {
                    const std::int64_t a = ((static_cast<std::int64_t>(r) * c + ch) * h + yy) * w + xx;
                    const std::int64_t b = ((static_cast<std::int64_t>(r) * c + ch) * h + yy) * w + (w - 1 - xx);
                    std::swap(x[a], x[b]);
                }
    }
}

inline void check_trainable(const Model& m, const Dataset& train) {
    if (m.frozen()) throw state_error("training: model is frozen");
    if (train.n() <= 0) throw data_error("training: empty dataset");
}

// Per-row representation distance used by the NR gate.
inline double row_distance(DistanceKind kind, const Tensor& a, const Tensor& b, int row) {
    const int d = a.dim(1);
    std::vector<double> u(static_cast<std::size_t>(d)), v(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        u[static_cast<std::size_t>(j)] = a[row * d + j];
        v[static_cast<std::size_t>(j)] = b[row * d + j];
    }
    switch (kind) {
        case DistanceKind::angular: return angular_distance(u, v);
        case DistanceKind::mse: return mse_distance(u, v);
        case DistanceKind::mae: return mae_distance(u, v);
    }
    throw domain_error("row_distance: bad kind");
}

}  // namespace detail

// Minimize cross-entropy on clean examples with SGD under the schedule.
inline Model standard_pretrain(Model model, const Dataset& train, const TrainSpec& spec,
                               const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
    detail::check_trainable(model, train);
    const LrSchedule sched = make_lr_schedule(spec.lr_kind, spec.epochs, spec.lr);
    SgdOptimizer opt(model, spec.momentum, spec.weight_decay);
    const BatchPlan plan{spec.batch_size, spec.seed, false};

    for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
        double loss_sum = 0.0;
        const auto batches = epoch_batches(train.n(), plan, epoch);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            auto [x, y] = gather_batch(train, batches[step]);
            detail::maybe_hflip(x, spec, epoch, static_cast<int>(step));
            Var loss = cross_entropy(model.forward(Var::constant(std::move(x))), y);
            model.zero_grad();
            loss.backward();
            opt.step(model, sched.rate(epoch));
            loss_sum += loss.value()[0] * static_cast<double>(y.size());
        }
        if (hooks.on_epoch) {
            EpochReport rep;
            rep.epoch = epoch;
            rep.mean_loss = loss_sum / train.n();
            if (eval_set) {
                rep.standard_acc = standard_accuracy(model, *eval_set);
                rep.robust_acc = robust_accuracy(model, *eval_set, spec.attack, EvalAttack::pgd,
                                                 spec.seed);
            }
            hooks.on_epoch(rep);
        }
    }
    return model;
}

// Madry-style adversarial training from the given initialization: each step
// generates delta by PGD, then applies an SGD step on L_CE(f(x+delta), y).
inline Model adversarial_train(Model model, const Dataset& train, const TrainSpec& spec,
                               const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
    detail::check_trainable(model, train);
    const LrSchedule sched = make_lr_schedule(spec.lr_kind, spec.epochs, spec.lr);
    SgdOptimizer opt(model, spec.momentum, spec.weight_decay);
    const BatchPlan plan{spec.batch_size, spec.seed, false};
    const LossConfig ce_only = LossConfig::make(KdVariant::none);

    for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
        double loss_sum = 0.0;
        const auto batches = epoch_batches(train.n(), plan, epoch);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            auto [x, y] = gather_batch(train, batches[step]);
            detail::maybe_hflip(x, spec, epoch, static_cast<int>(step));
            std::vector<std::uint64_t> seeds(y.size());
            for (std::size_t r = 0; r < y.size(); ++r)
                seeds[r] = detail::attack_row_seed(spec.seed, epoch, static_cast<int>(step),
                                                   static_cast<int>(r));
            const Tensor delta = pgd_seeded(model, x, y, spec.attack, seeds);
            Var loss = combined_loss(model, nullptr, x, delta, y, ce_only);
            model.zero_grad();
            loss.backward();
            opt.step(model, sched.rate(epoch));
            loss_sum += loss.value()[0] * static_cast<double>(y.size());
        }
        if (hooks.on_epoch) {
            EpochReport rep;
            rep.epoch = epoch;
            rep.mean_loss = loss_sum / train.n();
            if (eval_set) {
                rep.standard_acc = standard_accuracy(model, *eval_set);
                rep.robust_acc = robust_accuracy(model, *eval_set, spec.attack, EvalAttack::pgd,
                                                 spec.seed);
            }
            hooks.on_epoch(rep);
        }
    }
    return model;
}

// Adversarial finetuning with the representation constraint and noisy replay.
// The teacher is a frozen clone of the pretrained model; the student starts
// from the same parameters. Per example, the clean-input representation drift
//   a = d(h(x; student), h(x; teacher))
// decides whether the PGD perturbation is replaced by uniform noise while the
// NR window is open. The optimized loss is L_CE + lambda * L_kd with the
// perturbation actually applied.
inline Model arrest_finetune(const Model& pretrained, const Dataset& train, const TrainSpec& spec,
                             const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
    if (train.n() <= 0) throw data_error("training: empty dataset");
    const double tau = spec.tau();
    const int window = spec.effective_nr_window();
    const Model teacher = pretrained.clone_frozen();
    Model student = pretrained.clone_trainable();

    const LrSchedule sched = make_lr_schedule(spec.lr_kind, spec.epochs, spec.lr);
    SgdOptimizer opt(student, spec.momentum, spec.weight_decay);
    const BatchPlan plan{spec.batch_size, spec.seed, false};
    const LossConfig cfg{spec.kd_variant, spec.distance, spec.lambda};

    for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
        const bool nr_active = epoch <= window;
        double loss_sum = 0.0, drift_sum = 0.0;
        std::int64_t switched_count = 0, gated_count = 0;
        const auto batches = epoch_batches(train.n(), plan, epoch);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            auto [x, y] = gather_batch(train, batches[step]);
            detail::maybe_hflip(x, spec, epoch, static_cast<int>(step));
            const int nb = static_cast<int>(y.size());

            // NR gate on the clean inputs. Distinct from the RGKD term, which
            // compares the student on x+delta against the teacher on x.
            std::vector<double> drift(static_cast<std::size_t>(nb),
                                      std::numeric_limits<double>::quiet_NaN());
            std::vector<char> switched(static_cast<std::size_t>(nb), 0);
            if (nr_active) {
                Var xc = Var::constant(x);
                const Tensor rep_s = student.represent(xc).value();
                const Tensor rep_t = teacher.represent(xc).value();
                for (int r = 0; r < nb; ++r) {
                    drift[static_cast<std::size_t>(r)] =
                        detail::row_distance(spec.distance, rep_s, rep_t, r);
                    switched[static_cast<std::size_t>(r)] =
                        drift[static_cast<std::size_t>(r)] > tau ? 1 : 0;
                }
            }

            // PGD deltas. Strict mode attacks only the rows that keep delta;
            // per-row seeds make both modes bit-identical.
            std::vector<std::uint64_t> seeds(static_cast<std::size_t>(nb));
            for (int r = 0; r < nb; ++r)
                seeds[static_cast<std::size_t>(r)] =
                    detail::attack_row_seed(spec.seed, epoch, static_cast<int>(step), r);

            Tensor delta(x.shape());
            const std::int64_t row = x.size() / nb;
            if (spec.strict_nr) {
                std::vector<int> keep;
                for (int r = 0; r < nb; ++r)
                    if (!switched[static_cast<std::size_t>(r)]) keep.push_back(r);
                if (!keep.empty()) {
                    std::vector<int> shape = x.shape();
                    shape[0] = static_cast<int>(keep.size());
                    Tensor xs(shape);
                    std::vector<int> ys(keep.size());
                    std::vector<std::uint64_t> ss(keep.size());
                    for (std::size_t k = 0; k < keep.size(); ++k) {
                        for (std::int64_t j = 0; j < row; ++j)
                            xs[static_cast<std::int64_t>(k) * row + j] = x[keep[k] * row + j];
                        ys[k] = y[static_cast<std::size_t>(keep[k])];
                        ss[k] = seeds[static_cast<std::size_t>(keep[k])];
                    }
                    const Tensor ds = pgd_seeded(student, xs, ys, spec.attack, ss);
                    for (std::size_t k = 0; k < keep.size(); ++k)
                        for (std::int64_t j = 0; j < row; ++j)
                            delta[keep[k] * row + j] = ds[static_cast<std::int64_t>(k) * row + j];
                }
            } else {
                delta = pgd_seeded(student, x, y, spec.attack, seeds);
            }

            // Replace switched rows by uniform noise, then adjust into the box.
            for (int r = 0; r < nb; ++r) {
                if (!switched[static_cast<std::size_t>(r)]) continue;
                Rng nrng(detail::noise_row_seed(spec.seed, epoch, static_cast<int>(step), r));
                for (std::int64_t j = 0; j < row; ++j)
                    delta[r * row + j] = nrng.uniform(-spec.attack.epsilon, spec.attack.epsilon);
            }
            project_linf(delta.values(), x, spec.attack);

            if (hooks.on_nr_event) {
                for (int r = 0; r < nb; ++r) {
                    NrTraceEvent ev;
                    ev.epoch = epoch;
                    ev.step = static_cast<int>(step);
                    ev.row = r;
                    ev.dataset_index = batches[step][static_cast<std::size_t>(r)];
                    ev.drift = drift[static_cast<std::size_t>(r)];
                    ev.nr_active = nr_active;
                    ev.switched = switched[static_cast<std::size_t>(r)] != 0;
                    hooks.on_nr_event(ev);
                }
            }
            if (nr_active) {
                gated_count += nb;
                for (int r = 0; r < nb; ++r) {
                    drift_sum += drift[static_cast<std::size_t>(r)];
                    switched_count += switched[static_cast<std::size_t>(r)];
                }
            }

            Var loss = combined_loss(student, &teacher, x, delta, y, cfg);
            student.zero_grad();
            loss.backward();
            opt.step(student, sched.rate(epoch));
            loss_sum += loss.value()[0] * static_cast<double>(nb);
        }
        if (hooks.on_epoch) {
            EpochReport rep;
            rep.epoch = epoch;
            rep.mean_loss = loss_sum / train.n();
            if (nr_active && gated_count > 0) {
                rep.nr_switch_rate = static_cast<double>(switched_count) / gated_count;
                rep.mean_rep_distance = drift_sum / gated_count;
            }
            if (eval_set) {
                rep.standard_acc = standard_accuracy(student, *eval_set);
                rep.robust_acc = robust_accuracy(student, *eval_set, spec.attack, EvalAttack::pgd,
                                                 spec.seed);
            }
            hooks.on_epoch(rep);
        }
    }
    return student;
}

}  // namespace arrest

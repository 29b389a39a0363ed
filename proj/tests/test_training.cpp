#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "arrest/train.hpp"
#include "testutil.hpp"

using namespace arrest;

namespace {

TrainSpec toy_spec(int epochs, double eps, int steps) {
    TrainSpec s;
    s.epochs = epochs;
    s.batch_size = 20;
    s.lr_kind = "constant";
    s.lr = 0.05;
    s.seed = 3;
    s.attack.epsilon = eps;
    s.attack.step_size = steps > 0 ? std::max(eps / steps * 2.5, 1e-3) : 1e-3;
    s.attack.steps = steps;
    return s;
}

}  // namespace

TEST_CASE("aft schedule reproduces the reference rates at 20 epochs") {
    const LrSchedule s = make_lr_schedule("aft-paper", 20);
    for (int e = 1; e <= 10; ++e) REQUIRE(s.rate(e) == Catch::Approx(0.025).epsilon(1e-12));
    REQUIRE(s.rate(11) == Catch::Approx(0.02).epsilon(1e-12));
    REQUIRE(s.rate(12) == Catch::Approx(0.02).epsilon(1e-12));
    REQUIRE(s.rate(13) == Catch::Approx(0.01).epsilon(1e-12));
    REQUIRE(s.rate(14) == Catch::Approx(0.01).epsilon(1e-12));
    REQUIRE(s.rate(15) == Catch::Approx(0.005).epsilon(1e-12));
    REQUIRE(s.rate(16) == Catch::Approx(0.005).epsilon(1e-12));
    REQUIRE(s.rate(17) == Catch::Approx(0.0025).epsilon(1e-12));
    REQUIRE(s.rate(19) == Catch::Approx(0.00125).epsilon(1e-12));
}

TEST_CASE("pretrain schedule transitions at epochs 75 and 90 of 100") {
    const LrSchedule s = make_lr_schedule("pretrain-paper", 100);
    REQUIRE(s.rate(1) == Catch::Approx(0.1).epsilon(1e-12));
    REQUIRE(s.rate(74) == Catch::Approx(0.1).epsilon(1e-12));
    REQUIRE(s.rate(75) == Catch::Approx(0.01).epsilon(1e-12));
    REQUIRE(s.rate(89) == Catch::Approx(0.01).epsilon(1e-12));
    REQUIRE(s.rate(90) == Catch::Approx(0.001).epsilon(1e-12));
    REQUIRE(s.rate(100) == Catch::Approx(0.001).epsilon(1e-12));
}

TEST_CASE("schedule transition points scale with the epoch count") {
    const LrSchedule s = make_lr_schedule("aft-paper", 10);
    // 11 of 20 -> round(5.5) = 6; halvings at 13,15,... -> 7, 8, ...
    REQUIRE(s.rate(5) == Catch::Approx(0.025).epsilon(1e-12));
    REQUIRE(s.rate(6) == Catch::Approx(0.02).epsilon(1e-12));
    REQUIRE(s.rate(7) == Catch::Approx(0.01).epsilon(1e-12));
    REQUIRE(s.rate(8) == Catch::Approx(0.005).epsilon(1e-12));
}

TEST_CASE("constant schedule and unknown kinds") {
    const LrSchedule s = make_lr_schedule("constant", 5, 0.3);
    for (int e = 1; e <= 5; ++e) REQUIRE(s.rate(e) == 0.3);
    REQUIRE_THROWS_AS(make_lr_schedule("cosine", 5, 0.1), Error);
    REQUIRE_THROWS_AS(make_lr_schedule("constant", 5), Error);
}

TEST_CASE("tau follows 1 - cos(phi) and rejects bad settings") {
    TrainSpec s;
    s.phi_degrees = 30.0;
    REQUIRE(s.tau() == Catch::Approx(0.13397459621556135).epsilon(1e-12));
    s.phi_degrees = 45.0;
    REQUIRE(s.tau() == Catch::Approx(1.0 - std::sqrt(0.5)).epsilon(1e-12));
    s.phi_degrees = 95.0;
    REQUIRE_THROWS_AS(s.tau(), Error);
    s.phi_degrees = 30.0;
    s.tau_override = 0.0;
    REQUIRE_THROWS_AS(s.tau(), Error);
    s.tau_override = 0.5;
    REQUIRE(s.tau() == 0.5);
}

TEST_CASE("standard pretraining separates a linearly separable toy set") {
    const auto train = testutil::make_separable_dataset(30, 1);
    TrainSpec spec = toy_spec(3, 0.1, 2);
    std::vector<double> losses;
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochReport& r) { losses.push_back(r.mean_loss); };
    Model m = standard_pretrain(Model::build("small-mlp", 2, 1, 1), train, spec, nullptr, hooks);
    REQUIRE(standard_accuracy(m, train) == 100.0);
    REQUIRE(losses.back() <= losses.front());
}

TEST_CASE("training is bitwise reproducible per seed") {
    const auto train = testutil::make_separable_dataset(15, 2);
    TrainSpec spec = toy_spec(2, 0.1, 2);
    Model a = standard_pretrain(Model::build("small-mlp", 2, 1, 4), train, spec);
    Model b = standard_pretrain(Model::build("small-mlp", 2, 1, 4), train, spec);
    REQUIRE(testutil::models_bitwise_equal(a, b));
}

TEST_CASE("empty datasets and frozen models are rejected") {
    Dataset empty;
    TrainSpec spec = toy_spec(1, 0.1, 1);
    Model m = Model::build("small-mlp", 2, 1, 0);
    REQUIRE_THROWS_AS(standard_pretrain(m, empty, spec), Error);
    Model frozen = m.clone_frozen();
    const auto train = testutil::make_separable_dataset(5, 3);
    REQUIRE_THROWS_AS(standard_pretrain(frozen, train, spec), Error);
}

TEST_CASE("adversarial training with zero budget equals standard pretraining") {
    const auto train = testutil::make_separable_dataset(15, 5);
    TrainSpec spec = toy_spec(2, 0.0, 3);
    Model a = adversarial_train(Model::build("small-mlp", 2, 1, 6), train, spec);
    Model b = standard_pretrain(Model::build("small-mlp", 2, 1, 6), train, spec);
    REQUIRE(testutil::models_bitwise_equal(a, b));
}

TEST_CASE("adversarial training beats standard training under attack") {
    const Dataset pool = make_synthetic_images(40, 4, 1, 28, 28, 5, 0.15);
    auto [train, eval] = split_per_class(pool, 25, 15, 1);
    TrainSpec spec = toy_spec(5, 0.12, 5);
    spec.batch_size = 32;
    Model at = adversarial_train(Model::build("small-mlp", 4, 1, 9), train, spec);
    Model st = standard_pretrain(Model::build("small-mlp", 4, 1, 9), train, spec);
    const double robust_at = robust_accuracy(at, eval, spec.attack, EvalAttack::pgd, 1);
    const double robust_st = robust_accuracy(st, eval, spec.attack, EvalAttack::pgd, 1);
    REQUIRE(robust_at > robust_st);
}

TEST_CASE("arrest with lambda 0 and tau 1 matches plain adversarial finetuning") {
    const auto train = testutil::make_separable_dataset(15, 11);
    TrainSpec pre = toy_spec(2, 0.0, 1);
    Model pretrained = standard_pretrain(Model::build("small-mlp", 2, 1, 12), train, pre);

    TrainSpec spec = toy_spec(2, 0.12, 3);
    spec.lambda = 0.0;
    spec.tau_override = 1.0;
    spec.distance = DistanceKind::angular;
    Model via_arrest = arrest_finetune(pretrained, train, spec);
    Model via_plain = adversarial_train(pretrained.clone_trainable(), train, spec);
    REQUIRE(testutil::models_bitwise_equal(via_arrest, via_plain));
}

TEST_CASE("strict NR mode produces bitwise identical results") {
    const auto train = testutil::make_separable_dataset(15, 13);
    TrainSpec pre = toy_spec(2, 0.0, 1);
    Model pretrained = standard_pretrain(Model::build("small-mlp", 2, 1, 14), train, pre);

    TrainSpec spec = toy_spec(3, 0.15, 3);
    spec.lambda = 5.0;
    spec.tau_override = 0.02;  // low threshold so switching actually happens
    spec.nr_window = 2;
    Model a = arrest_finetune(pretrained, train, spec);
    spec.strict_nr = true;
    Model b = arrest_finetune(pretrained, train, spec);
    REQUIRE(testutil::models_bitwise_equal(a, b));
}

TEST_CASE("the frozen teacher is bitwise unchanged by a finetune run") {
    const auto train = testutil::make_separable_dataset(10, 17);
    TrainSpec pre = toy_spec(1, 0.0, 1);
    Model pretrained = standard_pretrain(Model::build("small-mlp", 2, 1, 18), train, pre);
    std::vector<Tensor> before;
    for (const auto& p : pretrained.params()) before.push_back(p.var.value());

    TrainSpec spec = toy_spec(2, 0.1, 2);
    spec.lambda = 10.0;
    Model student = arrest_finetune(pretrained, train, spec);
    for (std::size_t i = 0; i < before.size(); ++i)
        REQUIRE(testutil::bitwise_equal(pretrained.params()[i].var.value(), before[i]));
    REQUIRE_FALSE(testutil::models_bitwise_equal(student, pretrained));
}

TEST_CASE("NR gating trace: switching iff drift exceeds tau, only inside the window") {
    const auto train = testutil::make_separable_dataset(12, 19);
    TrainSpec pre = toy_spec(1, 0.0, 1);
    Model pretrained = standard_pretrain(Model::build("small-mlp", 2, 1, 20), train, pre);

    TrainSpec spec = toy_spec(4, 0.15, 2);
    spec.lambda = 0.0;        // let the representation drift quickly
    spec.tau_override = 1e-9; // essentially any drift switches
    spec.nr_window = 2;

    std::vector<NrTraceEvent> events;
    TrainHooks hooks;
    hooks.on_nr_event = [&](const NrTraceEvent& e) { events.push_back(e); };
    arrest_finetune(pretrained, train, spec, nullptr, hooks);

    REQUIRE_FALSE(events.empty());
    int switched_inside = 0;
    for (const auto& e : events) {
        REQUIRE(e.nr_active == (e.epoch <= 2));
        if (e.nr_active) {
            REQUIRE(e.switched == (e.drift > spec.tau_override));
            switched_inside += e.switched ? 1 : 0;
            if (e.epoch == 1 && e.step == 0) {
                // theta_r still equals theta_s*: zero drift, no switching
                REQUIRE(e.drift == 0.0);
                REQUIRE_FALSE(e.switched);
            }
        } else {
            REQUIRE_FALSE(e.switched);
            REQUIRE(std::isnan(e.drift));
        }
    }
    REQUIRE(switched_inside > 0);
}

TEST_CASE("epoch reports expose the switch rate only while NR is active") {
    const auto train = testutil::make_separable_dataset(10, 23);
    TrainSpec pre = toy_spec(1, 0.0, 1);
    Model pretrained = standard_pretrain(Model::build("small-mlp", 2, 1, 24), train, pre);

    TrainSpec spec = toy_spec(4, 0.1, 2);
    spec.nr_window = 2;
    std::vector<EpochReport> reports;
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochReport& r) { reports.push_back(r); };
    arrest_finetune(pretrained, train, spec, nullptr, hooks);

    REQUIRE(reports.size() == 4);
    for (const auto& r : reports) {
        if (r.epoch <= 2) {
            REQUIRE_FALSE(std::isnan(r.nr_switch_rate));
            REQUIRE(r.nr_switch_rate >= 0.0);
            REQUIRE(r.nr_switch_rate <= 1.0);
        } else {
            REQUIRE(std::isnan(r.nr_switch_rate));
        }
    }
}

TEST_CASE("nr_window defaults to half the epochs and cannot exceed them") {
    TrainSpec s;
    s.epochs = 20;
    REQUIRE(s.effective_nr_window() == 10);
    s.epochs = 5;
    REQUIRE(s.effective_nr_window() == 3);
    s.nr_window = 7;
    REQUIRE_THROWS_AS(s.effective_nr_window(), Error);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "arrest/attack.hpp"
#include "arrest/train.hpp"
#include "testutil.hpp"

using namespace arrest;
using testutil::random_tensor;

namespace {

AttackSpec spec_of(double eps, double step, int steps, bool random_start,
                   double lo = 0.0, double hi = 1.0) {
    AttackSpec s;
    s.epsilon = eps;
    s.step_size = step;
    s.steps = steps;
    s.random_start = random_start;
    s.clamp_lo = lo;
    s.clamp_hi = hi;
    return s;
}

}  // namespace

TEST_CASE("fgsm with zero budget returns a zero perturbation") {
    Rng rng(1);
    Model m = Model::build("small-mlp", 10, 1, 0);
    Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.1, 0.9);
    Tensor d = fgsm(m, x, {1, 2}, spec_of(0.0, 0.1, 1, false));
    for (std::int64_t i = 0; i < d.size(); ++i) REQUIRE(d[i] == 0.0);
}

TEST_CASE("fgsm rejects a negative budget") {
    Model m = Model::build("small-mlp", 10, 1, 0);
    Tensor x({1, 1, 28, 28});
    REQUIRE_THROWS_AS(fgsm(m, x, {0}, spec_of(-0.1, 0.1, 1, false)), Error);
}

TEST_CASE("fgsm matches the hand-derived gradient of a linear softmax model") {
    // f(x) = x W, cross-entropy toward class y. dL/dx = (p - onehot(y)) W^T.
    const Tensor W({3, 2}, {0.7, -0.3, -1.1, 0.4, 0.2, 0.9});
    const Tensor x({1, 3}, {0.5, 0.4, 0.6});
    const int y = 1;  // wrong class for these logits
    const double eps = 0.03;

    AttackLoss loss = [&](const Model&, const Var& x_adv, const std::vector<int>& labels) {
        return cross_entropy(matmul(x_adv, Var::constant(W)), labels);
    };
    Model carrier = Model::build("small-mlp", 2, 1, 0);
    Tensor delta = fgsm(carrier, x, {y}, spec_of(eps, eps, 1, false, -10.0, 10.0), loss);

    // Hand computation of the analytic gradient.
    double z0 = 0, z1 = 0;
    for (int j = 0; j < 3; ++j) {
        z0 += x[j] * W[j * 2 + 0];
        z1 += x[j] * W[j * 2 + 1];
    }
    const double m = std::max(z0, z1);
    const double p0 = std::exp(z0 - m) / (std::exp(z0 - m) + std::exp(z1 - m));
    const double p1 = 1.0 - p0;
    for (int j = 0; j < 3; ++j) {
        const double g = (p0 - 0.0) * W[j * 2 + 0] + (p1 - 1.0) * W[j * 2 + 1];
        const double want = eps * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
        REQUIRE(delta[j] == Catch::Approx(want).margin(1e-15));
    }
}

TEST_CASE("fgsm components are 0 or +-eps before the box binds") {
    Rng rng(5);
    Model m = Model::build("small-mlp", 10, 1, 4);
    const double eps = 0.05;
    Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.3, 0.7);  // box never binds
    Tensor d = fgsm(m, x, {3, 8}, spec_of(eps, eps, 1, false));
    for (std::int64_t i = 0; i < d.size(); ++i) {
        const double a = std::fabs(d[i]);
        REQUIRE((a == 0.0 || a == Catch::Approx(eps).margin(1e-18)));
    }
}

TEST_CASE("single-step pgd with large step equals fgsm elementwise") {
    Rng rng(7);
    Model m = Model::build("small-mlp", 10, 1, 9);
    Tensor x = random_tensor({3, 1, 28, 28}, rng, 0.0, 1.0);
    const std::vector<int> y{0, 5, 9};
    const auto spec = spec_of(8.0 / 255, 10.0 / 255, 1, false);
    Tensor a = fgsm(m, x, y, spec);
    Rng prng(0);
    Tensor b = pgd(m, x, y, spec, prng);
    REQUIRE(testutil::bitwise_equal(a, b));
}

TEST_CASE("pgd maximizes a linear objective at the box corner") {
    Rng rng(11);
    const Tensor c = random_tensor({1, 8}, rng, -1.0, 1.0);
    AttackLoss loss = [&](const Model&, const Var& x_adv, const std::vector<int>&) {
        return dot(x_adv, Var::constant(c));
    };
    Model carrier = Model::build("small-mlp", 2, 1, 0);
    Tensor x = Tensor::full({1, 8}, 0.5);
    const double eps = 0.2;
    Rng prng(3);
    Tensor d = pgd(carrier, x, {0}, spec_of(eps, 0.05, 8, true), prng, loss);
    for (int j = 0; j < 8; ++j) {
        const double want = eps * (c[j] > 0 ? 1.0 : -1.0);
        REQUIRE(d[j] == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("achieved linear objective is nondecreasing in the budget") {
    Rng rng(13);
    const Tensor c = random_tensor({1, 6}, rng, -1.0, 1.0);
    AttackLoss loss = [&](const Model&, const Var& x_adv, const std::vector<int>&) {
        return dot(x_adv, Var::constant(c));
    };
    Model carrier = Model::build("small-mlp", 2, 1, 0);
    Tensor x = Tensor::full({1, 6}, 0.5);
    double prev = -1e9;
    for (double eps : {0.0, 0.02, 0.05, 0.1, 0.2, 0.3}) {
        Rng prng(5);
        Tensor d = pgd(carrier, x, {0}, spec_of(eps, eps / 2 + 1e-9, 6, false), prng, loss);
        double obj = 0;
        for (int j = 0; j < 6; ++j) obj += c[j] * (x[j] + d[j]);
        REQUIRE(obj >= prev - 1e-12);
        prev = obj;
    }
}

TEST_CASE("pgd with zero budget returns zero for any step count") {
    Rng rng(17);
    Model m = Model::build("small-mlp", 10, 1, 2);
    Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
    Rng prng(9);
    Tensor d = pgd(m, x, {1, 2}, spec_of(0.0, 0.1, 5, true), prng);
    for (std::int64_t i = 0; i < d.size(); ++i) REQUIRE(d[i] == 0.0);
}

TEST_CASE("projection is idempotent") {
    Rng rng(19);
    Tensor x = random_tensor({1, 40}, rng, 0.0, 1.0);
    const auto spec = spec_of(0.07, 0.01, 1, false);
    Tensor d = random_tensor({1, 40}, rng, -0.5, 0.5);
    project_linf(d.values(), x, spec);
    Tensor d2 = d;
    project_linf(d2.values(), x, spec);
    REQUIRE(testutil::bitwise_equal(d, d2));
}

TEST_CASE("uniform noise stays in its support") {
    Rng rng(23);
    Tensor d = uniform_noise({4, 1, 5, 5}, 0.08, rng);
    for (std::int64_t i = 0; i < d.size(); ++i) REQUIRE(std::fabs(d[i]) <= 0.08);
    Tensor z = uniform_noise({2, 3}, 0.0, rng);
    for (std::int64_t i = 0; i < z.size(); ++i) REQUIRE(z[i] == 0.0);
}

TEST_CASE("uniform noise has the moments of U(-eps, eps)") {
    const double eps = 0.1;
    const int n = 1000000;
    Rng rng(29);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.uniform(-eps, eps);
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double sigma_mean = eps / std::sqrt(3.0) / std::sqrt(static_cast<double>(n));
    REQUIRE(std::fabs(mean) < 3.0 * sigma_mean);
    REQUIRE(var == Catch::Approx(eps * eps / 3.0).epsilon(0.05));
}

TEST_CASE("every generated perturbation is feasible") {
    Rng rng(31);
    Model m = Model::build("small-mlp", 10, 1, 6);
    for (int trial = 0; trial < 20; ++trial) {
        const double eps = rng.uniform(0.0, 0.3);
        const auto spec = spec_of(eps, eps / 3 + 1e-6, 3, trial % 2 == 0);
        Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
        std::vector<int> y{static_cast<int>(rng.uniform_index(10)),
                           static_cast<int>(rng.uniform_index(10))};
        Rng prng(static_cast<std::uint64_t>(trial));
        Tensor d = trial % 3 == 0 ? fgsm(m, x, y, spec) : pgd(m, x, y, spec, prng);
        for (std::int64_t i = 0; i < d.size(); ++i) {
            REQUIRE(std::fabs(d[i]) <= eps + 1e-15);
            REQUIRE(x[i] + d[i] >= 0.0 - 1e-15);
            REQUIRE(x[i] + d[i] <= 1.0 + 1e-15);
        }
    }
}

TEST_CASE("pgd degrades a trained model at least as much as fgsm") {
    const auto train_set = testutil::make_separable_dataset(30, 41);
    TrainSpec ts;
    ts.epochs = 3;
    ts.batch_size = 20;
    ts.lr_kind = "constant";
    ts.lr = 0.05;
    ts.seed = 1;
    Model m = standard_pretrain(Model::build("small-mlp", 2, 1, 1), train_set, ts);

    const auto eval_set = testutil::make_separable_dataset(30, 42);
    const auto spec = spec_of(0.25, 0.05, 10, true);
    const double clean = standard_accuracy(m, eval_set);
    const double under_fgsm = robust_accuracy(m, eval_set, spec, EvalAttack::fgsm, 7);
    const double under_pgd = robust_accuracy(m, eval_set, spec, EvalAttack::pgd, 7);
    REQUIRE(clean == 100.0);
    REQUIRE(under_fgsm <= clean);
    REQUIRE(under_pgd <= under_fgsm);
}

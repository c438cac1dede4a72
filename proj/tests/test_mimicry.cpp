#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "recast/mimicry.hpp"
#include "recast/model.hpp"

using namespace recast;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

TeacherModel random_teacher(const RecastConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    TeacherModel teacher;
    teacher.config = config;
    for (const auto& layer : config.modules) {
        std::vector<Tensor> ws, bs;
        for (const auto& m : layer) {
            ws.push_back(random_tensor(m.weight_shape(), rng));
            bs.push_back(random_tensor({m.bias_size()}, rng));
        }
        teacher.weights.push_back(std::move(ws));
        teacher.biases.push_back(std::move(bs));
    }
    return teacher;
}

} // namespace

TEST_CASE("smooth_l1 worked values") {
    Tape tape;
    Value half = tape.constant(Tensor::scalar(0.5));
    Value two = tape.constant(Tensor::scalar(2.0));
    Value zero = tape.constant(Tensor::scalar(0.0));
    REQUIRE(ops::smooth_l1(half, zero, 1.0).val()[0] == Catch::Approx(0.125));
    REQUIRE(ops::smooth_l1(two, zero, 1.0).val()[0] == Catch::Approx(1.5));

    Tensor x({3}, {1.0, -2.0, 0.5});
    Value a = tape.leaf(x);
    Value loss = ops::smooth_l1(a, tape.constant(x), 1.0);
    REQUIRE(loss.val()[0] == 0.0);
    tape.backward(loss);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(tape.grad(a)[i] == 0.0);
}

TEST_CASE("mse worked values") {
    Tape tape;
    Value a = tape.constant(Tensor({2}, {1.0, 3.0}));
    Value b = tape.constant(Tensor({2}, {1.0, 1.0}));
    REQUIRE(ops::mse(a, b).val()[0] == Catch::Approx(2.0));
    REQUIRE(ops::mse(a, a).val()[0] == 0.0);
}

TEST_CASE("cosine_similarity worked values and errors") {
    Tensor a({2}, {1.0, 0.0});
    Tensor b({2}, {0.0, 1.0});
    REQUIRE(cosine_similarity(a, a) == Catch::Approx(1.0));
    REQUIRE(cosine_similarity(a, b) == Catch::Approx(0.0).margin(1e-15));
    Tensor c({3}, {1.0, 2.0, 3.0});
    Tensor d({3}, {2.0, 4.0, 6.0});
    REQUIRE(cosine_similarity(c, d) == Catch::Approx(1.0));
    REQUIRE_THROWS_AS(cosine_similarity(a, Tensor({2})), numeric_error);
}

TEST_CASE("perturb_coefficients: sigma=0 identity and sampling statistics") {
    Rng rng(7);
    Tensor c = random_tensor({2, 3}, rng);
    {
        Rng noise(1);
        Tensor p = perturb_coefficients(c, 0.0, noise);
        REQUIRE(std::memcmp(p.data(), c.data(), c.numel() * sizeof(double)) == 0);
    }
    {
        const std::size_t draws = 100000;
        Rng noise(2);
        Tensor base({1, 1}, {0.0});
        double sum = 0.0, sq = 0.0;
        const double sigma = 0.1;
        for (std::size_t i = 0; i < draws; ++i) {
            const double eps = perturb_coefficients(base, sigma, noise)[0];
            sum += eps;
            sq += eps * eps;
        }
        const double mean = sum / draws;
        const double stddev = std::sqrt(sq / draws - mean * mean);
        REQUIRE(std::abs(mean) < 0.01 * sigma);
        REQUIRE(std::abs(stddev - sigma) < 0.02 * sigma);
    }
}

TEST_CASE("fixed point: teacher equal to generated weights does not drift") {
    RecastConfig config = RecastConfig::fc_stack(2, 4, 4, 1, 2, 1);
    RecastModel model = build_model(config, 5);
    TeacherModel teacher;
    teacher.config = config;
    for (std::size_t l = 1; l <= 2; ++l) {
        teacher.weights.push_back(
            {generate_weight(*model.bank_of_layer(l), model.coefficients[l - 1][0])});
        teacher.biases.push_back({Tensor({4})});
    }
    const RecastModel before = model;
    MimicryConfig cfg;
    cfg.max_epochs = 3;
    auto report = run_mimicry(teacher, model, cfg);
    for (const auto& m : report.modules) {
        REQUIRE(m.final_loss == 0.0);
        REQUIRE(m.cosine_similarity == Catch::Approx(1.0));
    }
    for (std::size_t i = 0; i < model.banks[0]->templates[0].numel(); ++i) {
        REQUIRE(model.banks[0]->templates[0][i] == before.banks[0]->templates[0][i]);
    }
}

TEST_CASE("single 4x4 FC layer, n=2, K=1: cosine >= 0.999 within 5000 steps") {
    RecastConfig config = RecastConfig::fc_stack(1, 4, 4, 1, 2, 1);
    RecastModel model = build_model(config, 21);
    TeacherModel teacher = random_teacher(config, 22);
    MimicryConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 5000;
    auto report = run_mimicry(teacher, model, cfg);
    REQUIRE(report.modules.size() == 1);
    REQUIRE(report.modules[0].cosine_similarity >= 0.999);
    // Teacher biases arrive verbatim.
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(model.biases[0][0][i] == teacher.biases[0][0][i]);
    }
}

TEST_CASE("mimicry is bit-reproducible under a fixed seed") {
    RecastConfig config = RecastConfig::fc_stack(2, 6, 6, 1, 2, 2);
    TeacherModel teacher = random_teacher(config, 3);
    MimicryConfig cfg;
    cfg.max_epochs = 50;
    cfg.sigma = 0.01;
    cfg.noise_enabled = true;
    cfg.seed = 123;
    RecastModel m1 = build_model(config, 9);
    RecastModel m2 = build_model(config, 9);
    run_mimicry(teacher, m1, cfg);
    run_mimicry(teacher, m2, cfg);
    for (std::size_t i = 0; i < m1.banks[0]->templates[0].numel(); ++i) {
        REQUIRE(m1.banks[0]->templates[0][i] == m2.banks[0]->templates[0][i]);
    }
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t i = 0; i < m1.coefficients[l][0].numel(); ++i) {
            REQUIRE(m1.coefficients[l][0][i] == m2.coefficients[l][0][i]);
        }
    }
}

TEST_CASE("coefficient gradient equals (1/K)<dW, T_i> analytically") {
    Rng rng(33);
    const std::size_t n = 3, K = 2, d = 4;
    std::vector<Tensor> templates;
    for (std::size_t i = 0; i < n; ++i) templates.push_back(random_tensor({d, d}, rng));
    Tensor coeffs = random_tensor({K, n}, rng);
    Tensor target = random_tensor({d, d}, rng);

    Tape tape;
    std::vector<Value> tv;
    for (auto& t : templates) tv.push_back(tape.leaf(t));
    Value cv = tape.leaf(coeffs);
    Value w = ops::generate_weight(tv, cv);
    Value loss = ops::mse(w, tape.constant(target), Reduction::Sum);
    tape.backward(loss);

    // dL/dW for summed MSE is 2(W - target).
    Tensor dw = tensor_scale(tensor_sub(w.val(), target), 2.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            const double expected = tensor_dot(dw, templates[i]) / static_cast<double>(K);
            const double got = tape.grad(cv)(k, i);
            REQUIRE(std::abs(got - expected) / std::max(std::abs(expected), 1e-8) < 1e-10);
        }
    }
    // dL/dT_i = (1/K) (sum_k C_k,i) dW.
    for (std::size_t i = 0; i < n; ++i) {
        double csum = 0.0;
        for (std::size_t k = 0; k < K; ++k) csum += coeffs(k, i);
        for (std::size_t e = 0; e < d * d; ++e) {
            const double expected = csum * dw[e] / static_cast<double>(K);
            const double got = tape.grad(tv[i])[e];
            REQUIRE(std::abs(got - expected) / std::max(std::abs(expected), 1e-8) < 1e-10);
        }
    }
}

TEST_CASE("shared-bank template gradients accumulate across layers") {
    // Two layers sharing one bank: a mimicry epoch must move templates by the
    // sum of both layers' contributions. Compare one epoch against a manual
    // two-step replay.
    RecastConfig config = RecastConfig::fc_stack(2, 3, 3, 1, 2, 1);
    TeacherModel teacher = random_teacher(config, 4);
    MimicryConfig cfg;
    cfg.max_epochs = 1;
    RecastModel model = build_model(config, 6);
    RecastModel replay = build_model(config, 6);
    run_mimicry(teacher, model, cfg);

    for (std::size_t l = 1; l <= 2; ++l) {
        Tape tape;
        std::vector<Value> tv;
        for (auto& t : replay.banks[0]->templates) tv.push_back(tape.leaf(t));
        Value cv = tape.leaf(replay.coefficients[l - 1][0]);
        Value w = ops::generate_weight(tv, cv);
        Value loss =
            ops::smooth_l1(w, tape.constant(teacher.weights[l - 1][0]), 1.0, Reduction::Sum);
        tape.backward(loss);
        for (std::size_t i = 0; i < tv.size(); ++i) {
            for (std::size_t e = 0; e < replay.banks[0]->templates[i].numel(); ++e) {
                replay.banks[0]->templates[i][e] -= cfg.learning_rate * tape.grad(tv[i])[e];
            }
        }
        for (std::size_t e = 0; e < replay.coefficients[l - 1][0].numel(); ++e) {
            replay.coefficients[l - 1][0][e] -= cfg.learning_rate * tape.grad(cv)[e];
        }
    }
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t e = 0; e < model.banks[0]->templates[i].numel(); ++e) {
            REQUIRE(model.banks[0]->templates[i][e] ==
                    Catch::Approx(replay.banks[0]->templates[i][e]).margin(1e-14));
        }
    }
}

TEST_CASE("topology mismatch is rejected before training") {
    RecastConfig a = RecastConfig::fc_stack(2, 4, 4, 1, 2, 1);
    RecastConfig b = RecastConfig::fc_stack(3, 4, 4, 1, 2, 1);
    TeacherModel teacher = random_teacher(a, 1);
    RecastModel model = build_model(b, 1);
    MimicryConfig cfg;
    cfg.max_epochs = 1;
    REQUIRE_THROWS_AS(run_mimicry(teacher, model, cfg), topology_error);
}

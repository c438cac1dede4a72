#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "recast/diagnostics.hpp"
#include "recast/mimicry.hpp"
#include "recast/til.hpp"

using namespace recast;

namespace {

SuiteConfig small_suite() {
    SuiteConfig cfg;
    cfg.tasks = 3;
    cfg.classes = 3;
    cfg.dim = 8;
    cfg.seed = 11;
    cfg.train_per_class = 40;
    cfg.val_per_class = 10;
    cfg.test_per_class = 20;
    return cfg;
}

RecastConfig small_arch() { return RecastConfig::fc_stack(2, 8, 8, 1, 3, 2); }

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("task suites are deterministic under seed") {
    auto a = make_task_suite(small_suite());
    auto b = make_task_suite(small_suite());
    REQUIRE(a.size() == 3);
    for (std::size_t t = 0; t < 3; ++t) {
        REQUIRE(bit_equal(a[t].train.features, b[t].train.features));
        REQUIRE(bit_equal(a[t].test.features, b[t].test.features));
        REQUIRE(a[t].train.labels == b[t].train.labels);
    }
}

TEST_CASE("task 0 is separable: nearest-mean oracle exceeds 90% at 6 sigma") {
    SuiteConfig cfg = small_suite();
    cfg.mean_separation = 6.0;
    auto suite = make_task_suite(cfg);
    const double acc = nearest_mean_accuracy(suite[0].train, suite[0].test, cfg.classes);
    REQUIRE(acc > 0.90);
}

TEST_CASE("rotation shift preserves per-class covariance spectra to 1e-9") {
    auto suite = make_task_suite(small_suite());
    const std::size_t d = 8;
    auto class_cov_spectrum = [&](const Dataset& data, std::size_t cls) {
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data.labels[i] != cls) continue;
            std::vector<double> r(d);
            for (std::size_t k = 0; k < d; ++k) r[k] = data.features(i, k);
            rows.push_back(std::move(r));
        }
        std::vector<double> mean(d, 0.0);
        for (const auto& r : rows)
            for (std::size_t k = 0; k < d; ++k) mean[k] += r[k] / rows.size();
        Tensor cov({d, d});
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    cov(i, j) += (r[i] - mean[i]) * (r[j] - mean[j]) / rows.size();
                }
            }
        }
        // Covariance is symmetric PSD; its singular values are its eigenvalues.
        return svd_small(cov);
    };
    // Labels permute across tasks, so compare the sorted union of per-class
    // spectra, which is invariant under both the rotation and the relabeling.
    auto all_spectra = [&](const TaskSpec& task) {
        std::vector<double> all;
        for (std::size_t c = 0; c < 3; ++c) {
            auto sv = class_cov_spectrum(task.train, c);
            all.insert(all.end(), sv.begin(), sv.end());
        }
        std::sort(all.begin(), all.end());
        return all;
    };
    auto s0 = all_spectra(suite[0]);
    auto s1 = all_spectra(suite[1]);
    REQUIRE(s0.size() == s1.size());
    for (std::size_t i = 0; i < s0.size(); ++i) {
        REQUIRE(std::abs(s0[i] - s1[i]) < 1e-9);
    }
}

TEST_CASE("pretrain_teacher reaches target accuracy and matches the config topology") {
    auto suite = make_task_suite(small_suite());
    const RecastConfig arch = small_arch();
    TeacherTrainConfig cfg;
    cfg.target_accuracy = 0.9;
    cfg.seed = 2;
    TeacherModel teacher = pretrain_teacher(suite[0], arch, cfg);
    REQUIRE(teacher.weights.size() == arch.layers);
    for (std::size_t l = 0; l < arch.layers; ++l) {
        REQUIRE(teacher.weights[l][0].shape() == arch.modules[l][0].weight_shape());
        REQUIRE(teacher.biases[l][0].numel() == arch.modules[l][0].bias_size());
    }
    TeacherModel again = pretrain_teacher(suite[0], arch, cfg);
    REQUIRE(bit_equal(teacher.weights[0][0], again.weights[0][0]));

    TeacherTrainConfig impossible = cfg;
    impossible.target_accuracy = 1.01;
    REQUIRE_THROWS_AS(pretrain_teacher(suite[0], arch, impossible), numeric_error);
}

TEST_CASE("budget is enforced before any update") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    const RecastModel before = model;
    const long long needed =
        trainable_param_count(model, 3, TrainMode::CoefficientsAndHead);
    ParamBudget tight{needed - 1};
    AdaptConfig cfg;
    cfg.epochs = 5;
    REQUIRE_THROWS_AS(
        train_task(model, suite[0], tight, TrainMode::CoefficientsAndHead, cfg),
        budget_error);
    // No parameter moved.
    for (std::size_t l = 0; l < 2; ++l) {
        REQUIRE(bit_equal(model.coefficients[l][0], before.coefficients[l][0]));
    }
    ParamBudget exact{needed};
    REQUIRE_NOTHROW(
        train_task(model, suite[0], exact, TrainMode::CoefficientsAndHead, cfg));
}

TEST_CASE("trainable parameter count equals accounting plus head, exactly") {
    RecastModel model = build_model(small_arch(), 5);
    const auto acc = param_accounting(model.config);
    const long long head = 3 * 8 + 3;
    REQUIRE(trainable_param_count(model, 3, TrainMode::HeadOnly) == head);
    REQUIRE(trainable_param_count(model, 3, TrainMode::CoefficientsAndHead) ==
            acc.task_params + head);
    REQUIRE(trainable_param_count(model, 3, TrainMode::Full) >
            acc.task_params + head);
}

TEST_CASE("templates are frozen in coefficients+head mode, byte for byte") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    std::vector<Tensor> before;
    for (const auto& t : model.banks[0]->templates) before.push_back(t);
    AdaptConfig cfg;
    cfg.epochs = 30;
    train_task(model, suite[0], ParamBudget{100000}, TrainMode::CoefficientsAndHead, cfg);
    for (std::size_t i = 0; i < before.size(); ++i) {
        REQUIRE(bit_equal(model.banks[0]->templates[i], before[i]));
    }
}

TEST_CASE("full mode moves templates on a non-degenerate batch") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    const Tensor before = model.banks[0]->templates[0];
    AdaptConfig cfg;
    cfg.epochs = 1;
    train_task(model, suite[0], ParamBudget{100000}, TrainMode::Full, cfg);
    double moved = 0.0;
    for (std::size_t i = 0; i < before.numel(); ++i) {
        moved += std::abs(model.banks[0]->templates[0][i] - before[i]);
    }
    REQUIRE(moved > 0.0);
}

TEST_CASE("zero-epoch training returns the initialization snapshot") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    const RecastModel before = model;
    AdaptConfig cfg;
    cfg.epochs = 0;
    TaskSnapshot snap =
        train_task(model, suite[0], ParamBudget{100000}, TrainMode::CoefficientsAndHead, cfg);
    for (std::size_t l = 0; l < 2; ++l) {
        REQUIRE(bit_equal(snap.coefficients[l][0], before.coefficients[l][0]));
    }
    // Restoring reproduces the recorded logits bit-exactly.
    const double acc = restore_and_eval(model, snap, suite[0]);
    REQUIRE(acc == snap.test_accuracy);
    const Tensor logits = eval_logits(model, snap.head, suite[0].test.features);
    REQUIRE(bit_equal(logits, snap.test_logits));
}

TEST_CASE("run_sequence: zero forgetting and constant earlier-task accuracy") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    AdaptConfig cfg;
    cfg.epochs = 60;
    SequenceResult result = run_sequence(model, suite, ParamBudget{100000},
                                         TrainMode::CoefficientsAndHead, cfg);
    REQUIRE(result.accuracy.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t i = 0; i <= j; ++i) {
            REQUIRE(result.accuracy[j][i] == result.accuracy[i][i]);
        }
    }
    // Logits recorded at training time survive later tasks bit-exactly.
    for (std::size_t i = 0; i < 3; ++i) {
        restore_and_eval(model, result.snapshots[i], suite[i]);
        const Tensor logits =
            eval_logits(model, result.snapshots[i].head, suite[i].test.features);
        REQUIRE(bit_equal(logits, result.snapshots[i].test_logits));
    }
    REQUIRE(result.task_params == param_accounting(model.config).task_params);
}

TEST_CASE("single-task sequence average equals that task's accuracy") {
    SuiteConfig cfg = small_suite();
    cfg.tasks = 1;
    auto suite = make_task_suite(cfg);
    RecastModel model = build_model(small_arch(), 5);
    AdaptConfig adapt;
    adapt.epochs = 30;
    SequenceResult result =
        run_sequence(model, suite, ParamBudget{100000}, TrainMode::CoefficientsAndHead, adapt);
    REQUIRE(result.average_top1 == result.accuracy[0][0]);
}

TEST_CASE("restore rejects mismatched topology") {
    auto suite = make_task_suite(small_suite());
    RecastModel model = build_model(small_arch(), 5);
    AdaptConfig cfg;
    cfg.epochs = 1;
    TaskSnapshot snap =
        train_task(model, suite[0], ParamBudget{100000}, TrainMode::CoefficientsAndHead, cfg);
    RecastModel other = build_model(RecastConfig::fc_stack(3, 8, 8, 1, 3, 2), 5);
    REQUIRE_THROWS_AS(restore_and_eval(other, snap, suite[0]), topology_error);
}

TEST_CASE("mode parsing") {
    REQUIRE(parse_mode("coefficients+head") == TrainMode::CoefficientsAndHead);
    REQUIRE(parse_mode("head-only") == TrainMode::HeadOnly);
    REQUIRE(parse_mode("full") == TrainMode::Full);
    REQUIRE_THROWS_AS(parse_mode("banana"), value_error);
}

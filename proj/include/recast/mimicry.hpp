#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "recast/autograd.hpp"
#include "recast/errors.hpp"
#include "recast/model.hpp"
#include "recast/rng.hpp"
#include "recast/tensor.hpp"

namespace recast {

/// Pretrained-style target: per-(layer, module) weights and biases matching a
/// RecastConfig topology.
struct TeacherModel {
    RecastConfig config;
    std::vector<std::vector<Tensor>> weights; // [layer][module]
    std::vector<std::vector<Tensor>> biases;

    void validate() const {
        config.validate();
        if (weights.size() != config.layers || biases.size() != config.layers) {
            throw topology_error("teacher: layer count mismatch");
        }
        for (std::size_t l = 0; l < config.layers; ++l) {
            if (weights[l].size() != config.modules[l].size()) {
                throw topology_error("teacher: module count mismatch at layer " +
                                     std::to_string(l + 1));
            }
            for (std::size_t m = 0; m < weights[l].size(); ++m) {
                if (weights[l][m].shape() != config.modules[l][m].weight_shape()) {
                    throw topology_error("teacher: weight shape mismatch at layer " +
                                         std::to_string(l + 1));
                }
            }
        }
    }
};

enum class MimicryLoss { SmoothL1, Mse };

struct MimicryConfig {
    MimicryLoss loss = MimicryLoss::SmoothL1;
    double beta = 1.0;        // SmoothL1 transition point
    double learning_rate = 0.01;
    std::size_t max_epochs = 2000;
    double sigma = 0.01;      // coefficient-noise std, used when noise_enabled
    bool noise_enabled = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) throw value_error("mimicry: learning rate must be > 0");
        if (sigma < 0.0) throw value_error("mimicry: sigma must be >= 0");
        if (beta <= 0.0) throw value_error("mimicry: beta must be > 0");
    }
};

struct ModuleReport {
    std::size_t layer = 0;  // 1-based
    std::size_t module = 0; // 0-based
    double final_loss = 0.0; // mean-reduced, for comparability across shapes
    double cosine_similarity = 0.0;
};

struct ReconstructionReport {
    std::vector<ModuleReport> modules;
    std::size_t epochs_run = 0;
    double wall_seconds = 0.0;
};

/// dot(a,b)/(|a||b|) over flattened tensors.
inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw shape_error("cosine_similarity: element counts differ");
    }
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw numeric_error("cosine_similarity: undefined for zero-norm input");
    }
    return tensor_dot(a, b) / (na * nb);
}

/// Returns C + ε with ε ~ N(0, σ²) i.i.d.; the input is untouched.
inline Tensor perturb_coefficients(const Tensor& coeffs, double sigma, Rng& rng) {
    if (sigma < 0.0) throw value_error("perturb_coefficients: sigma must be >= 0");
    if (sigma == 0.0) return coeffs;
    Tensor out = coeffs;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += rng.normal(0.0, sigma);
    return out;
}

namespace detail {

/// One gradient-descent visit of module (l, m): builds the small graph
/// W* = generate(bank, C + ε), takes cfg.loss against the teacher weight,
/// and applies the η-step to both coefficients and this group's templates.
/// Losses are element-summed for the update so the step size is independent
/// of module area; reports remain mean-reduced.
inline double mimicry_step(RecastModel& model, const TeacherModel& teacher, std::size_t l,
                           std::size_t m, const MimicryConfig& cfg, std::uint64_t epoch) {
    TemplateBank& bank = *model.bank_of_layer(l);
    Tensor& coeffs = model.coefficients[l - 1][m];

    Tape tape;
    std::vector<Value> tv;
    tv.reserve(bank.templates.size());
    for (auto& t : bank.templates) tv.push_back(tape.leaf(t, true));
    Value cv = tape.leaf(coeffs, true);
    Value cin = cv;
    if (cfg.noise_enabled && cfg.sigma > 0.0) {
        // Fresh draw per (l, m, epoch); stream independent of visit order.
        Rng noise_rng(Rng::mix(cfg.seed, (epoch << 20) ^ (l << 8) ^ m, 0x6e01));
        Tensor eps(coeffs.shape());
        for (std::size_t i = 0; i < eps.numel(); ++i) {
            eps[i] = noise_rng.normal(0.0, cfg.sigma);
        }
        cin = ops::add(cv, tape.constant(eps));
    }
    Value w = ops::generate_weight(tv, cin);
    Value target = tape.constant(teacher.weights[l - 1][m]);
    Value loss = cfg.loss == MimicryLoss::SmoothL1
                     ? ops::smooth_l1(w, target, cfg.beta, Reduction::Sum)
                     : ops::mse(w, target, Reduction::Sum);
    const double loss_value = loss.val()[0];
    if (!std::isfinite(loss_value)) {
        throw numeric_error("mimicry diverged at layer " + std::to_string(l) + " module " +
                            std::to_string(m) + " (loss is not finite)");
    }
    tape.backward(loss);

    const double eta = cfg.learning_rate;
    for (std::size_t i = 0; i < bank.templates.size(); ++i) {
        const Tensor& g = tape.grad(tv[i]);
        for (std::size_t j = 0; j < g.numel(); ++j) bank.templates[i][j] -= eta * g[j];
    }
    const Tensor& gc = tape.grad(cv);
    for (std::size_t j = 0; j < gc.numel(); ++j) coeffs[j] -= eta * gc[j];
    return loss_value;
}

inline std::size_t configured_threads() {
    const char* env = std::getenv("RECAST_THREADS");
    if (!env) return 1;
    const long v = std::atol(env);
    return v >= 1 ? static_cast<std::size_t>(v) : 1;
}

} // namespace detail

/// Neural Mimicry: iteratively fits banks and coefficients so generated
/// weights reproduce the teacher's. Teacher biases are copied verbatim.
/// Emits `epoch=<e> total_loss=<v>` per epoch when `progress` is non-null.
/// Banks of distinct groups are independent, so group iteration may run on
/// RECAST_THREADS threads; results are identical to the serial order.
inline ReconstructionReport run_mimicry(const TeacherModel& teacher, RecastModel& model,
                                        const MimicryConfig& cfg,
                                        std::ostream* progress = nullptr) {
    cfg.validate();
    teacher.validate();
    if (teacher.config.layers != model.config.layers) {
        throw topology_error("mimicry: teacher/model layer counts differ");
    }
    for (std::size_t l = 0; l < model.config.layers; ++l) {
        if (teacher.config.modules[l].size() != model.config.modules[l].size()) {
            throw topology_error("mimicry: module counts differ at layer " +
                                 std::to_string(l + 1));
        }
        for (std::size_t m = 0; m < model.config.modules[l].size(); ++m) {
            if (teacher.config.modules[l][m].weight_shape() !=
                model.config.modules[l][m].weight_shape()) {
                throw topology_error("mimicry: weight shapes differ at layer " +
                                     std::to_string(l + 1));
            }
        }
    }

    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t L = model.config.layers;
    const std::size_t G = model.config.groups;
    const std::size_t threads = detail::configured_threads();

    // Layers of each group, in layer order.
    std::vector<std::vector<std::size_t>> group_layers(G);
    for (std::size_t l = 1; l <= L; ++l) {
        group_layers[group_index(l, L, G) - 1].push_back(l);
    }

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<double> group_loss(G, 0.0);
        auto run_group = [&](std::size_t g) {
            for (std::size_t l : group_layers[g]) {
                for (std::size_t m = 0; m < model.config.modules[l - 1].size(); ++m) {
                    group_loss[g] += detail::mimicry_step(model, teacher, l, m, cfg, epoch);
                }
            }
        };
        if (threads <= 1 || G == 1) {
            for (std::size_t g = 0; g < G; ++g) run_group(g);
        } else {
            std::vector<std::thread> pool;
            const std::size_t nthreads = std::min(threads, G);
            for (std::size_t t = 0; t < nthreads; ++t) {
                pool.emplace_back([&, t]() {
                    for (std::size_t g = t; g < G; g += nthreads) run_group(g);
                });
            }
            for (auto& th : pool) th.join();
        }
        if (progress) {
            double total = 0.0;
            for (double v : group_loss) total += v;
            (*progress) << "epoch=" << epoch + 1 << " total_loss=" << total << "\n";
        }
    }

    // Teacher biases transfer verbatim; they are not templated.
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t m = 0; m < model.config.modules[l].size(); ++m) {
            model.biases[l][m] = teacher.biases[l][m];
        }
    }

    ReconstructionReport report;
    report.epochs_run = cfg.max_epochs;
    for (std::size_t l = 1; l <= L; ++l) {
        for (std::size_t m = 0; m < model.config.modules[l - 1].size(); ++m) {
            const Tensor w = generate_weight(*model.bank_of_layer(l),
                                             model.coefficients[l - 1][m]);
            const Tensor& target = teacher.weights[l - 1][m];
            Tensor diff = tensor_sub(w, target);
            double loss = 0.0;
            if (cfg.loss == MimicryLoss::SmoothL1) {
                for (std::size_t i = 0; i < diff.numel(); ++i) {
                    const double x = std::fabs(diff[i]);
                    loss += x < cfg.beta ? 0.5 * x * x / cfg.beta : x - 0.5 * cfg.beta;
                }
            } else {
                for (std::size_t i = 0; i < diff.numel(); ++i) loss += diff[i] * diff[i];
            }
            ModuleReport mr;
            mr.layer = l;
            mr.module = m;
            mr.final_loss = loss / static_cast<double>(diff.numel());
            mr.cosine_similarity = cosine_similarity(w, target);
            report.modules.push_back(mr);
        }
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace recast

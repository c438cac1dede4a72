#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "recast/autograd.hpp"
#include "recast/errors.hpp"
#include "recast/mimicry.hpp"
#include "recast/model.hpp"
#include "recast/rng.hpp"
#include "recast/tensor.hpp"

namespace recast {

struct Dataset {
    Tensor features; // N x d
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct TaskSpec {
    int id = 0;
    Dataset train, val, test;
    std::size_t classes = 0;
    std::uint64_t seed = 0;
};

enum class ShiftKind { Rotation, MeanShuffle };

struct SuiteConfig {
    std::size_t tasks = 3;     // D
    std::size_t classes = 4;   // C
    std::size_t dim = 16;      // d
    ShiftKind shift = ShiftKind::Rotation;
    std::uint64_t seed = 0;
    std::size_t train_per_class = 150;
    std::size_t val_per_class = 30;
    std::size_t test_per_class = 60;
    double cluster_sigma = 1.0;
    double mean_separation = 4.0; // min pairwise class-mean distance, in sigmas
};

namespace detail {

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
inline std::vector<double> random_orthogonal(std::size_t d, Rng& rng) {
    std::vector<std::vector<double>> q;
    while (q.size() < d) {
        std::vector<double> v(d);
        for (auto& x : v) x = rng.normal();
        for (const auto& u : q) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
            for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (auto& x : v) x /= norm;
        q.push_back(std::move(v));
    }
    std::vector<double> m(d * d);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) m[r * d + c] = q[r][c];
    return m;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

} // namespace detail

/// Seeded Gaussian-mixture task suite. Task 0 carries the base mixture; each
/// subsequent task reuses the same per-class noise draws under a task-specific
/// orthogonal rotation and class-mean permutation (Rotation kind) or a mean
/// permutation alone (MeanShuffle kind). Reusing the draws keeps per-class
/// covariance spectra identical across tasks.
inline std::vector<TaskSpec> make_task_suite(const SuiteConfig& cfg) {
    if (cfg.tasks < 1) throw value_error("make_task_suite: need >= 1 task");
    if (cfg.classes < 2) throw value_error("make_task_suite: need >= 2 classes");
    if (cfg.dim < 1) throw value_error("make_task_suite: need dim >= 1");

    const std::size_t C = cfg.classes, d = cfg.dim;
    Rng mean_rng(Rng::mix(cfg.seed, 0x11));
    std::vector<std::vector<double>> means(C, std::vector<double>(d));
    for (auto& mu : means) {
        for (auto& x : mu) x = mean_rng.normal();
    }
    double min_dist = 1e300;
    for (std::size_t i = 0; i < C; ++i) {
        for (std::size_t j = i + 1; j < C; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = means[i][k] - means[j][k];
                s += diff * diff;
            }
            min_dist = std::min(min_dist, std::sqrt(s));
        }
    }
    const double scale = cfg.mean_separation * cfg.cluster_sigma / min_dist;
    for (auto& mu : means) {
        for (auto& x : mu) x *= scale;
    }

    // Base noise, one stream per (split, class); shared by every task.
    const std::size_t per[3] = {cfg.train_per_class, cfg.val_per_class, cfg.test_per_class};
    std::vector<std::vector<std::vector<double>>> noise(3);
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t c = 0; c < C; ++c) {
            Rng rng(Rng::mix(cfg.seed, 0x20 + s, c));
            std::vector<double> eps(per[s] * d);
            for (auto& x : eps) x = rng.normal();
            noise[s].push_back(std::move(eps));
        }
    }

    std::vector<TaskSpec> suite;
    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        std::vector<double> rot; // row-major d x d, empty = identity
        std::vector<std::size_t> perm(C);
        std::iota(perm.begin(), perm.end(), 0);
        if (t > 0) {
            Rng shift_rng(Rng::mix(cfg.seed, 0x40, t));
            perm = detail::random_permutation(C, shift_rng);
            if (cfg.shift == ShiftKind::Rotation) {
                rot = detail::random_orthogonal(d, shift_rng);
            }
        }
        TaskSpec task;
        task.id = static_cast<int>(t);
        task.classes = C;
        task.seed = cfg.seed;
        Dataset* splits[3] = {&task.train, &task.val, &task.test};
        for (std::size_t s = 0; s < 3; ++s) {
            const std::size_t n = per[s] * C;
            Tensor X({n, d});
            std::vector<std::size_t> y(n);
            for (std::size_t c = 0; c < C; ++c) {
                const auto& mu = means[perm[c]];
                for (std::size_t i = 0; i < per[s]; ++i) {
                    const std::size_t row = c * per[s] + i;
                    y[row] = c;
                    for (std::size_t k = 0; k < d; ++k) {
                        double v = mu[k] + cfg.cluster_sigma * noise[s][c][i * d + k];
                        X(row, k) = v;
                    }
                    if (!rot.empty()) {
                        std::vector<double> rx(d, 0.0);
                        for (std::size_t r = 0; r < d; ++r) {
                            for (std::size_t k = 0; k < d; ++k) {
                                rx[r] += rot[r * d + k] * X(row, k);
                            }
                        }
                        for (std::size_t k = 0; k < d; ++k) X(row, k) = rx[k];
                    }
                }
            }
            splits[s]->features = std::move(X);
            splits[s]->labels = std::move(y);
        }
        suite.push_back(std::move(task));
    }
    return suite;
}

/// Nearest-class-mean oracle accuracy; the independent separability check.
inline double nearest_mean_accuracy(const Dataset& train, const Dataset& test,
                                    std::size_t classes) {
    const std::size_t d = train.features.cols();
    std::vector<std::vector<double>> mean(classes, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(classes, 0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const std::size_t c = train.labels[i];
        ++count[c];
        for (std::size_t k = 0; k < d; ++k) mean[c][k] += train.features(i, k);
    }
    for (std::size_t c = 0; c < classes; ++c) {
        for (auto& x : mean[c]) x /= static_cast<double>(count[c]);
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < classes; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = test.features(i, k) - mean[c][k];
                s += diff * diff;
            }
            if (s < best_d) {
                best_d = s;
                best = c;
            }
        }
        if (best == test.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

// --- optimizer -------------------------------------------------------------

/// Adaptive moment estimation with decoupled weight decay.
class AdamW {
  public:
    AdamW(double lr, double weight_decay = 1e-6, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void register_param(Tensor* p) {
        params_.push_back(p);
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
    }

    void set_lr(double lr) { lr_ = lr; }

    void step(const std::vector<Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            const Tensor& g = grads[i];
            for (std::size_t j = 0; j < p.numel(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[j]);
            }
        }
    }

  private:
    double lr_, wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
};

// --- teacher pretraining ----------------------------------------------------

struct TeacherTrainConfig {
    std::size_t max_epochs = 600;
    double learning_rate = 0.01;
    double target_accuracy = 0.90; // on the training split
    std::uint64_t seed = 0;
};

namespace detail {

inline void require_fc_only(const RecastConfig& config, const char* who) {
    for (const auto& layer : config.modules) {
        for (const auto& m : layer) {
            if (m.type != ModuleType::FullyConnected || layer.size() != 1) {
                throw value_error(std::string(who) +
                                  ": the task harness supports one FC module per layer");
            }
        }
    }
}

inline Tensor he_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

} // namespace detail

/// Trains a plain (non-templated) FC network on task 0 and exports its
/// backbone weights as a TeacherModel. Fails if the accuracy target is not
/// reached within the epoch cap.
inline TeacherModel pretrain_teacher(const TaskSpec& task0, const RecastConfig& arch,
                                     const TeacherTrainConfig& cfg) {
    arch.validate();
    detail::require_fc_only(arch, "pretrain_teacher");
    const std::size_t L = arch.layers;
    const std::size_t C = task0.classes;
    const std::size_t width = arch.modules[L - 1][0].d_out;

    Rng rng(Rng::mix(cfg.seed, 0x7ea));
    std::vector<Tensor> weights, biases;
    for (std::size_t l = 0; l < L; ++l) {
        const ModuleKind& mk = arch.modules[l][0];
        weights.push_back(detail::he_uniform(mk.weight_shape(), mk.fan_in(), rng));
        biases.push_back(Tensor({mk.bias_size()}));
    }
    Tensor head_w = detail::he_uniform({C, width}, width, rng);
    Tensor head_b({C});

    AdamW opt(cfg.learning_rate, 1e-6);
    for (auto& w : weights) opt.register_param(&w);
    for (auto& b : biases) opt.register_param(&b);
    opt.register_param(&head_w);
    opt.register_param(&head_b);

    double train_acc = 0.0;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Tape tape;
        Value x = tape.constant(task0.train.features);
        std::vector<Value> wv, bv;
        for (std::size_t l = 0; l < L; ++l) {
            wv.push_back(tape.leaf(weights[l], true));
            bv.push_back(tape.leaf(biases[l], true));
            x = ops::relu(ops::linear(x, wv[l], bv[l]));
        }
        Value hw = tape.leaf(head_w, true);
        Value hb = tape.leaf(head_b, true);
        Value logits = ops::linear(x, hw, hb);
        Value loss = ops::softmax_cross_entropy(logits, task0.train.labels);
        tape.backward(loss);

        std::vector<Tensor> grads;
        for (std::size_t l = 0; l < L; ++l) grads.push_back(tape.grad(wv[l]));
        for (std::size_t l = 0; l < L; ++l) grads.push_back(tape.grad(bv[l]));
        grads.push_back(tape.grad(hw));
        grads.push_back(tape.grad(hb));
        opt.step(grads);

        std::size_t hits = 0;
        const Tensor& lv = logits.val();
        for (std::size_t i = 0; i < task0.train.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c) {
                if (lv(i, c) > lv(i, best)) best = c;
            }
            if (best == task0.train.labels[i]) ++hits;
        }
        train_acc = static_cast<double>(hits) / static_cast<double>(task0.train.size());
        if (train_acc >= cfg.target_accuracy && epoch + 1 >= 20) break;
    }
    if (train_acc < cfg.target_accuracy) {
        throw numeric_error("pretrain_teacher: accuracy " + std::to_string(train_acc) +
                            " below target after epoch cap");
    }

    TeacherModel teacher;
    teacher.config = arch;
    for (std::size_t l = 0; l < L; ++l) {
        teacher.weights.push_back({weights[l]});
        teacher.biases.push_back({biases[l]});
    }
    return teacher;
}

// --- task adaptation ---------------------------------------------------------

enum class TrainMode { CoefficientsAndHead, HeadOnly, Full };

inline const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::CoefficientsAndHead: return "coefficients+head";
        case TrainMode::HeadOnly: return "head-only";
        case TrainMode::Full: return "full";
    }
    return "?";
}

inline TrainMode parse_mode(const std::string& s) {
    if (s == "coefficients+head" || s == "ch") return TrainMode::CoefficientsAndHead;
    if (s == "head-only" || s == "head") return TrainMode::HeadOnly;
    if (s == "full") return TrainMode::Full;
    throw value_error("unknown training mode: " + s);
}

struct ParamBudget {
    long long r_max = 0; // maximum trainable parameters per task
};

struct AdaptConfig {
    std::size_t epochs = 300;
    double learning_rate = 0.02;
    double weight_decay = 1e-6;
    std::uint64_t seed = 0;
};

struct TaskSnapshot {
    int task_id = 0;
    std::vector<std::vector<Tensor>> coefficients; // [layer][module]
    ClassifierHead head;
    double test_accuracy = 0.0;
    Tensor test_logits; // recorded at training time; not persisted
};

namespace detail {

struct BackboneGraph {
    std::vector<std::vector<Value>> template_leaves; // per group
    std::vector<Value> coeff_leaves;                 // per layer (single module)
    std::vector<Value> bias_leaves;
    Value output;
};

/// Builds the full differentiable backbone pass h = relu(...relu(x W1ᵀ+b1)...).
inline BackboneGraph backbone_graph(RecastModel& model, Tape& tape, const Tensor& x,
                                    bool train_coeffs, bool train_templates,
                                    bool train_biases) {
    BackboneGraph g;
    g.template_leaves.resize(model.config.groups);
    for (std::size_t grp = 0; grp < model.config.groups; ++grp) {
        for (auto& t : model.banks[grp]->templates) {
            g.template_leaves[grp].push_back(tape.leaf(t, train_templates));
        }
    }
    Value h = tape.constant(x);
    for (std::size_t l = 1; l <= model.config.layers; ++l) {
        const std::size_t grp = group_index(l, model.config.layers, model.config.groups) - 1;
        Value cv = tape.leaf(model.coefficients[l - 1][0], train_coeffs);
        Value bv = tape.leaf(model.biases[l - 1][0], train_biases);
        g.coeff_leaves.push_back(cv);
        g.bias_leaves.push_back(bv);
        Value w = ops::generate_weight(g.template_leaves[grp], cv);
        h = ops::relu(ops::linear(h, w, bv));
    }
    g.output = h;
    return g;
}

inline double accuracy_from_logits(const Tensor& logits, const std::vector<std::size_t>& y) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(i, c) > logits(i, best)) best = c;
        }
        if (best == y[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(y.size());
}

} // namespace detail

/// Evaluates the model plus head on a dataset; deterministic, shared by
/// training-time and restore-time paths so logits are bit-identical.
inline Tensor eval_logits(RecastModel& model, const ClassifierHead& head, const Tensor& x) {
    detail::require_fc_only(model.config, "eval_logits");
    Tape tape;
    auto g = detail::backbone_graph(model, tape, x, false, false, false);
    Value hw = tape.constant(head.weight);
    Value hb = tape.constant(head.bias);
    return ops::linear(g.output, hw, hb).val();
}

inline long long head_param_count(std::size_t width, std::size_t classes) {
    return static_cast<long long>(width * classes + classes);
}

inline long long trainable_param_count(const RecastModel& model, std::size_t classes,
                                       TrainMode mode) {
    const auto acc = param_accounting(model.config);
    const std::size_t width =
        model.config.modules[model.config.layers - 1][0].weight_shape()[0];
    const long long head = head_param_count(width, classes);
    switch (mode) {
        case TrainMode::HeadOnly: return head;
        case TrainMode::CoefficientsAndHead: return acc.task_params + head;
        case TrainMode::Full: {
            long long total = acc.task_params + head;
            for (const auto& bank : model.banks) {
                for (const auto& t : bank->templates) {
                    total += static_cast<long long>(t.numel());
                }
            }
            for (const auto& layer : model.biases) {
                for (const auto& b : layer) total += static_cast<long long>(b.numel());
            }
            return total;
        }
    }
    throw value_error("unknown mode");
}

/// Adapts the model to one task under the parameter budget. Templates stay
/// frozen except in Full mode; the classifier head is always fresh and
/// task-private. AdamW with stepwise decay (x0.1 every third of the run).
inline TaskSnapshot train_task(RecastModel& model, const TaskSpec& task,
                               const ParamBudget& budget, TrainMode mode,
                               const AdaptConfig& cfg) {
    detail::require_fc_only(model.config, "train_task");
    const std::size_t width =
        model.config.modules[model.config.layers - 1][0].weight_shape()[0];
    const long long trainable = trainable_param_count(model, task.classes, mode);
    if (trainable > budget.r_max) {
        throw budget_error("train_task: trainable parameters " + std::to_string(trainable) +
                           " exceed budget " + std::to_string(budget.r_max));
    }

    Rng head_rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(task.id), 0x4ead));
    ClassifierHead head;
    head.weight = detail::he_uniform({task.classes, width}, width, head_rng);
    head.bias = Tensor({task.classes});

    const bool train_coeffs = mode != TrainMode::HeadOnly;
    const bool train_templates = mode == TrainMode::Full;
    const bool train_biases = mode == TrainMode::Full;

    AdamW opt(cfg.learning_rate, cfg.weight_decay);
    std::vector<Tensor*> coeff_params, bias_params, template_params;
    if (train_coeffs) {
        for (auto& layer : model.coefficients) {
            for (auto& c : layer) {
                coeff_params.push_back(&c);
                opt.register_param(&c);
            }
        }
    }
    if (train_templates) {
        for (auto& bank : model.banks) {
            for (auto& t : bank->templates) {
                template_params.push_back(&t);
                opt.register_param(&t);
            }
        }
    }
    if (train_biases) {
        for (auto& layer : model.biases) {
            for (auto& b : layer) {
                bias_params.push_back(&b);
                opt.register_param(&b);
            }
        }
    }
    opt.register_param(&head.weight);
    opt.register_param(&head.bias);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::size_t stage = cfg.epochs ? (3 * epoch) / cfg.epochs : 0;
        opt.set_lr(cfg.learning_rate * std::pow(0.1, static_cast<double>(stage)));

        Tape tape;
        auto g = detail::backbone_graph(model, tape, task.train.features, train_coeffs,
                                        train_templates, train_biases);
        Value hw = tape.leaf(head.weight, true);
        Value hb = tape.leaf(head.bias, true);
        Value logits = ops::linear(g.output, hw, hb);
        Value loss = ops::softmax_cross_entropy(logits, task.train.labels);
        tape.backward(loss);

        std::vector<Tensor> grads;
        if (train_coeffs) {
            for (Value v : g.coeff_leaves) grads.push_back(tape.grad(v));
        }
        if (train_templates) {
            for (const auto& group : g.template_leaves) {
                for (Value v : group) grads.push_back(tape.grad(v));
            }
        }
        if (train_biases) {
            for (Value v : g.bias_leaves) grads.push_back(tape.grad(v));
        }
        grads.push_back(tape.grad(hw));
        grads.push_back(tape.grad(hb));
        opt.step(grads);
    }

    TaskSnapshot snap;
    snap.task_id = task.id;
    snap.coefficients = model.coefficients;
    snap.head = head;
    snap.test_logits = eval_logits(model, head, task.test.features);
    snap.test_accuracy = detail::accuracy_from_logits(snap.test_logits, task.test.labels);
    return snap;
}

/// Writes snapshot coefficients and head into the model (banks untouched)
/// and evaluates on the task's test split.
inline double restore_and_eval(RecastModel& model, const TaskSnapshot& snap,
                               const TaskSpec& task) {
    if (snap.coefficients.size() != model.config.layers) {
        throw topology_error("restore: snapshot layer count mismatch");
    }
    for (std::size_t l = 0; l < model.config.layers; ++l) {
        if (snap.coefficients[l].size() != model.coefficients[l].size()) {
            throw topology_error("restore: module count mismatch at layer " +
                                 std::to_string(l + 1));
        }
        for (std::size_t m = 0; m < snap.coefficients[l].size(); ++m) {
            if (!snap.coefficients[l][m].same_shape(model.coefficients[l][m])) {
                throw topology_error("restore: coefficient shape mismatch");
            }
        }
    }
    model.coefficients = snap.coefficients;
    model.heads[snap.task_id] = snap.head;
    const Tensor logits = eval_logits(model, snap.head, task.test.features);
    return detail::accuracy_from_logits(logits, task.test.labels);
}

struct SequenceResult {
    // accuracy[j][i] = accuracy on task i evaluated after training task j (i <= j)
    std::vector<std::vector<double>> accuracy;
    std::vector<TaskSnapshot> snapshots;
    double average_top1 = 0.0;
    long long task_params = 0;
};

/// Trains tasks in order, snapshotting each, and re-evaluates all earlier
/// tasks after every task. The averaged top-1 is the mean of the final row.
inline SequenceResult run_sequence(RecastModel& model, const std::vector<TaskSpec>& suite,
                                   const ParamBudget& budget, TrainMode mode,
                                   const AdaptConfig& cfg) {
    if (suite.empty()) throw value_error("run_sequence: empty suite");
    SequenceResult result;
    result.task_params = param_accounting(model.config).task_params;
    for (std::size_t j = 0; j < suite.size(); ++j) {
        result.snapshots.push_back(train_task(model, suite[j], budget, mode, cfg));
        std::vector<double> row;
        for (std::size_t i = 0; i <= j; ++i) {
            row.push_back(restore_and_eval(model, result.snapshots[i], suite[i]));
        }
        result.accuracy.push_back(std::move(row));
    }
    const auto& last = result.accuracy.back();
    result.average_top1 =
        std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(last.size());
    return result;
}

} // namespace recast

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "recast/autograd.hpp"
#include "recast/errors.hpp"
#include "recast/rng.hpp"
#include "recast/tensor.hpp"

namespace recast {

enum class ModuleType { FullyConnected, AttentionQKV, ConvKernel };

/// Shape contract for one target module.
struct ModuleKind {
    ModuleType type = ModuleType::FullyConnected;
    std::size_t d_out = 0, d_in = 0;        // FullyConnected
    std::size_t d = 0;                      // AttentionQKV
    std::size_t c_out = 0, c_in = 0, k = 0; // ConvKernel

    static ModuleKind fc(std::size_t d_out, std::size_t d_in) {
        ModuleKind m;
        m.type = ModuleType::FullyConnected;
        m.d_out = d_out;
        m.d_in = d_in;
        return m;
    }
    static ModuleKind qkv(std::size_t d) {
        ModuleKind m;
        m.type = ModuleType::AttentionQKV;
        m.d = d;
        return m;
    }
    static ModuleKind conv(std::size_t c_out, std::size_t c_in, std::size_t k) {
        ModuleKind m;
        m.type = ModuleType::ConvKernel;
        m.c_out = c_out;
        m.c_in = c_in;
        m.k = k;
        return m;
    }

    std::vector<std::size_t> weight_shape() const {
        switch (type) {
            case ModuleType::FullyConnected: return {d_out, d_in};
            case ModuleType::AttentionQKV: return {3 * d, d};
            case ModuleType::ConvKernel: return {c_out, c_in, k, k};
        }
        throw value_error("unknown module type");
    }

    std::size_t bias_size() const {
        switch (type) {
            case ModuleType::FullyConnected: return d_out;
            case ModuleType::AttentionQKV: return 3 * d;
            case ModuleType::ConvKernel: return c_out;
        }
        throw value_error("unknown module type");
    }

    std::size_t fan_in() const {
        switch (type) {
            case ModuleType::FullyConnected: return d_in;
            case ModuleType::AttentionQKV: return d;
            case ModuleType::ConvKernel: return c_in * k * k;
        }
        throw value_error("unknown module type");
    }

    bool operator==(const ModuleKind& o) const {
        return type == o.type && weight_shape() == o.weight_shape();
    }
};

struct RecastConfig {
    std::size_t layers = 0;            // L
    std::size_t groups = 0;            // G
    std::size_t templates_per_bank = 0; // n
    std::size_t coefficient_sets = 0;  // K
    std::vector<std::vector<ModuleKind>> modules; // per-layer module layout

    void validate() const {
        if (layers == 0) throw value_error("config: L must be >= 1");
        if (groups < 1 || groups > layers) throw value_error("config: need 1 <= G <= L");
        if (templates_per_bank < 1) throw value_error("config: n must be >= 1");
        if (coefficient_sets < 1) throw value_error("config: K must be >= 1");
        if (modules.size() != layers) {
            throw value_error("config: module layout must cover every layer");
        }
        for (const auto& layer : modules) {
            if (layer.empty()) throw value_error("config: every layer needs >= 1 module");
            for (const auto& m : layer) {
                for (std::size_t e : m.weight_shape()) {
                    if (e == 0) throw value_error("config: weight extents must be positive");
                }
            }
        }
    }

    /// Uniform stack of L identical FC modules; the default desk topology.
    static RecastConfig fc_stack(std::size_t layers, std::size_t width, std::size_t input_dim,
                                 std::size_t groups, std::size_t n, std::size_t K) {
        RecastConfig c;
        c.layers = layers;
        c.groups = groups;
        c.templates_per_bank = n;
        c.coefficient_sets = K;
        for (std::size_t l = 0; l < layers; ++l) {
            c.modules.push_back({ModuleKind::fc(width, l == 0 ? input_dim : width)});
        }
        return c;
    }
};

/// g = ceil(l / (L/G)) with L/G as an exact rational, 1-based everywhere.
inline std::size_t group_index(std::size_t l, std::size_t L, std::size_t G) {
    if (l < 1 || l > L) {
        throw value_error("group_index: layer " + std::to_string(l) + " outside [1," +
                          std::to_string(L) + "]");
    }
    return (l * G + L - 1) / L;
}

struct TemplateBank {
    std::size_t group = 0; // 1-based group id
    std::vector<Tensor> templates;
};

struct ClassifierHead {
    Tensor weight; // C x d
    Tensor bias;   // C
};

/// Layer/module topology, shared banks, per-module coefficients and biases,
/// optional per-task classifier heads.
struct RecastModel {
    RecastConfig config;
    // banks[g-1] is shared by reference semantics: all modules of a group
    // index the same bank object.
    std::vector<std::shared_ptr<TemplateBank>> banks;
    std::vector<std::vector<Tensor>> coefficients; // [layer][module], each K x n
    std::vector<std::vector<Tensor>> biases;       // [layer][module]
    std::map<int, ClassifierHead> heads;           // per-task, keyed by task id

    std::shared_ptr<TemplateBank>& bank_of_layer(std::size_t l) {
        return banks[group_index(l, config.layers, config.groups) - 1];
    }
    const std::shared_ptr<TemplateBank>& bank_of_layer(std::size_t l) const {
        return banks[group_index(l, config.layers, config.groups) - 1];
    }
};

/// Eq. 1-2 evaluated on plain tensors: W = (1/K) Σ_k Σ_i C[k][i] T_i.
inline Tensor generate_weight(const TemplateBank& bank, const Tensor& coeffs) {
    if (coeffs.rank() != 2) throw shape_error("generate_weight: coefficients must be K x n");
    const std::size_t K = coeffs.rows(), n = coeffs.cols();
    if (n != bank.templates.size()) {
        throw shape_error("generate_weight: coefficient width " + std::to_string(n) +
                          " != bank size " + std::to_string(bank.templates.size()));
    }
    Tensor out(bank.templates[0].shape());
    const double invK = 1.0 / static_cast<double>(K);
    for (std::size_t i = 0; i < n; ++i) {
        double a = 0.0;
        for (std::size_t k = 0; k < K; ++k) a += coeffs(k, i);
        a *= invK;
        const Tensor& t = bank.templates[i];
        for (std::size_t j = 0; j < out.numel(); ++j) out[j] += a * t[j];
    }
    return out;
}

/// Orthonormal rows of the K x n coefficient matrix; K > n is handled by
/// orthonormalizing in blocks of n rows.
inline Tensor init_coefficient_matrix(std::size_t K, std::size_t n, Rng& rng) {
    Tensor c({K, n});
    for (std::size_t base = 0; base < K; base += n) {
        const std::size_t rows = std::min(n, K - base);
        // Gram-Schmidt on Gaussian rows.
        std::vector<std::vector<double>> q;
        while (q.size() < rows) {
            std::vector<double> v(n);
            for (auto& x : v) x = rng.normal();
            for (const auto& u : q) {
                double d = 0.0;
                for (std::size_t i = 0; i < n; ++i) d += v[i] * u[i];
                for (std::size_t i = 0; i < n; ++i) v[i] -= d * u[i];
            }
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-8) continue; // degenerate draw, resample
            for (auto& x : v) x /= norm;
            q.push_back(std::move(v));
        }
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i) c(base + r, i) = q[r][i];
    }
    return c;
}

inline Tensor init_template(const std::vector<std::size_t>& shape, std::size_t fan_in,
                            Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

/// Builds banks, coefficients, and zero biases for a validated config.
/// Heterogeneous weight shapes within one group are rejected.
inline RecastModel build_model(const RecastConfig& config, std::uint64_t seed) {
    config.validate();
    RecastModel model;
    model.config = config;

    // Derive each group's weight shape and check homogeneity.
    std::vector<std::vector<std::size_t>> group_shape(config.groups);
    std::vector<std::size_t> group_fan_in(config.groups, 0);
    for (std::size_t l = 1; l <= config.layers; ++l) {
        const std::size_t g = group_index(l, config.layers, config.groups);
        for (const auto& m : config.modules[l - 1]) {
            const auto ws = m.weight_shape();
            if (group_shape[g - 1].empty()) {
                group_shape[g - 1] = ws;
                group_fan_in[g - 1] = m.fan_in();
            } else if (group_shape[g - 1] != ws) {
                throw topology_error("group " + std::to_string(g) +
                                     " mixes weight shapes " +
                                     Tensor::shape_string(group_shape[g - 1]) + " and " +
                                     Tensor::shape_string(ws));
            }
        }
    }

    Rng template_rng(Rng::mix(seed, 0x7e3a));
    for (std::size_t g = 1; g <= config.groups; ++g) {
        auto bank = std::make_shared<TemplateBank>();
        bank->group = g;
        for (std::size_t i = 0; i < config.templates_per_bank; ++i) {
            bank->templates.push_back(
                init_template(group_shape[g - 1], group_fan_in[g - 1], template_rng));
        }
        model.banks.push_back(std::move(bank));
    }

    for (std::size_t l = 1; l <= config.layers; ++l) {
        std::vector<Tensor> layer_coeffs;
        std::vector<Tensor> layer_biases;
        for (std::size_t m = 0; m < config.modules[l - 1].size(); ++m) {
            Rng coeff_rng(Rng::mix(seed, l, m + 1));
            layer_coeffs.push_back(init_coefficient_matrix(config.coefficient_sets,
                                                           config.templates_per_bank,
                                                           coeff_rng));
            layer_biases.push_back(Tensor({config.modules[l - 1][m].bias_size()}));
        }
        model.coefficients.push_back(std::move(layer_coeffs));
        model.biases.push_back(std::move(layer_biases));
    }
    return model;
}

enum class Activation { Identity, ReLU, GeLU };

inline Value apply_activation(Value v, Activation act) {
    switch (act) {
        case Activation::Identity: return v;
        case Activation::ReLU: return ops::relu(v);
        case Activation::GeLU: return ops::gelu(v);
    }
    throw value_error("unknown activation");
}

/// Differentiable module forward driven by an externally-owned tape. The
/// caller supplies the template/coefficient/bias leaves so it can control
/// which are trainable.
inline Value forward_module_graph(const ModuleKind& kind, Value x, Value weight, Value bias,
                                  Activation act) {
    switch (kind.type) {
        case ModuleType::FullyConnected:
            return apply_activation(ops::linear(x, weight, bias), act);
        case ModuleType::AttentionQKV:
            // Joint projection; callers split the 3d-wide output into Q,K,V.
            return ops::linear(x, weight, bias);
        case ModuleType::ConvKernel:
            return ops::conv2d(x, weight); // bias unused in kernel contract
    }
    throw value_error("unknown module type");
}

/// Plain-tensor forward of a single module of the model.
inline Tensor forward_module(const RecastModel& model, std::size_t l, std::size_t m,
                             const Tensor& x, Activation act = Activation::Identity) {
    if (l < 1 || l > model.config.layers) throw value_error("forward_module: bad layer");
    if (m >= model.config.modules[l - 1].size()) {
        throw value_error("forward_module: bad module index");
    }
    const ModuleKind& kind = model.config.modules[l - 1][m];
    Tape tape;
    Value xv = tape.constant(x);
    std::vector<Value> tv;
    for (const auto& t : model.bank_of_layer(l)->templates) tv.push_back(tape.constant(t));
    Value w = ops::generate_weight(tv, tape.constant(model.coefficients[l - 1][m]));
    Value b = tape.constant(model.biases[l - 1][m]);
    return forward_module_graph(kind, xv, w, b, act).val();
}

/// Splits a B x 3d joint QKV projection into its three blocks.
inline std::array<Tensor, 3> split_qkv(const Tensor& joint) {
    if (joint.rank() != 2 || joint.cols() % 3 != 0) {
        throw shape_error("split_qkv: expected B x 3d tensor");
    }
    const std::size_t B = joint.rows(), d = joint.cols() / 3;
    std::array<Tensor, 3> out{Tensor({B, d}), Tensor({B, d}), Tensor({B, d})};
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t q = 0; q < 3; ++q) out[q](b, j) = joint(b, q * d + j);
    return out;
}

struct ParamAccounting {
    long long task_params = 0;   // Σ_l M_l · n · K
    long long savings = 0;       // dense params - (template params + task params)
};

/// task_params = Σ_l M_l·n·K and
/// S = Σ dense - (Σ_g n·|bank shape| + task_params); collapses to
/// L·M·d² − (G·n·d² + L·M·n·K) for uniform module dimensions.
inline ParamAccounting param_accounting(const RecastConfig& config) {
    config.validate();
    ParamAccounting acc;
    long long dense = 0;
    for (const auto& layer : config.modules) {
        for (const auto& m : layer) {
            long long numel = 1;
            for (std::size_t e : m.weight_shape()) numel *= static_cast<long long>(e);
            dense += numel;
            acc.task_params += static_cast<long long>(config.templates_per_bank *
                                                      config.coefficient_sets);
        }
    }
    // Per-group bank sizes, derived the same way build_model derives them.
    std::vector<long long> group_numel(config.groups, 0);
    for (std::size_t l = 1; l <= config.layers; ++l) {
        const std::size_t g = group_index(l, config.layers, config.groups);
        if (group_numel[g - 1] == 0 && !config.modules[l - 1].empty()) {
            long long numel = 1;
            for (std::size_t e : config.modules[l - 1][0].weight_shape()) {
                numel *= static_cast<long long>(e);
            }
            group_numel[g - 1] = numel;
        }
    }
    long long template_params = 0;
    for (long long gn : group_numel) {
        template_params += gn * static_cast<long long>(config.templates_per_bank);
    }
    acc.savings = dense - (template_params + acc.task_params);
    return acc;
}

} // namespace recast

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "recast/errors.hpp"
#include "recast/mimicry.hpp"
#include "recast/model.hpp"
#include "recast/tensor.hpp"

namespace recast {

/// Singular values of a small dense matrix via one-sided Jacobi, descending.
/// Desk-scale bound M, N <= 512.
inline std::vector<double> svd_small(const Tensor& a) {
    if (a.rank() != 2) throw shape_error("svd_small: expected 2-D tensor");
    if (a.rows() > 512 || a.cols() > 512) {
        throw value_error("svd_small: extents exceed the 512 desk-scale bound");
    }
    // Work on the transpose when rows < cols so columns are the short axis.
    const bool transposed = a.rows() < a.cols();
    const std::size_t m = transposed ? a.cols() : a.rows();
    const std::size_t n = transposed ? a.rows() : a.cols();
    std::vector<double> u(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            u[i * n + j] = transposed ? a(j, i) : a(i, j);

    constexpr double tol = 1e-12;
    constexpr int max_sweeps = 64;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = u[i * n + p], y = u[i * n + q];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
                converged = false;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = u[i * n + p], y = u[i * n + q];
                    u[i * n + p] = c * x - s * y;
                    u[i * n + q] = s * x + c * y;
                }
            }
        }
    }
    if (!converged) throw numeric_error("svd_small: Jacobi sweeps did not converge");

    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += u[i * n + j] * u[i * n + j];
        sv[j] = std::sqrt(s);
    }
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

/// Average pairwise Frobenius distance between a bank's templates using the
/// literal ordered-pair prefactor 1/(n(n-1)) over the unordered sum.
inline double frobenius_diversity(const TemplateBank& bank) {
    const std::size_t n = bank.templates.size();
    if (n < 2) throw numeric_error("frobenius_diversity: undefined for n < 2");
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            sum += frobenius_norm(tensor_sub(bank.templates[i], bank.templates[j]));
        }
    }
    return sum / static_cast<double>(n * (n - 1));
}

/// Flattens higher-rank templates to d_out x rest for SVD.
inline Tensor matricize(const Tensor& t) {
    if (t.rank() == 2) return t;
    const std::size_t rows = t.shape()[0];
    return Tensor({rows, t.numel() / rows}, t.raw());
}

/// Shannon entropy (natural log) of a template's simplex-normalized singular
/// values; zero values are skipped.
inline double sv_entropy_single(const Tensor& t) {
    const std::vector<double> sv = svd_small(matricize(t));
    double total = 0.0;
    for (double s : sv) total += s;
    if (total == 0.0) throw numeric_error("sv_entropy: undefined for all-zero template");
    double h = 0.0;
    for (double s : sv) {
        if (s <= 0.0) continue;
        const double p = s / total;
        h -= p * std::log(p);
    }
    return h;
}

/// Mean singular-value entropy over the bank's templates.
inline double sv_entropy(const TemplateBank& bank) {
    double h = 0.0;
    for (const auto& t : bank.templates) h += sv_entropy_single(t);
    return h / static_cast<double>(bank.templates.size());
}

/// Flattened concatenation of all K x n coefficients of all modules of layer l.
inline std::vector<double> layer_coefficient_vector(const RecastModel& model, std::size_t l) {
    std::vector<double> v;
    for (const auto& c : model.coefficients[l - 1]) {
        v.insert(v.end(), c.raw().begin(), c.raw().end());
    }
    return v;
}

/// Pairwise cosine similarity of layer coefficient vectors within group g.
/// Returned matrix is indexed by the group's layers in layer order.
inline Tensor coefficient_similarity(const RecastModel& model, std::size_t g) {
    std::vector<std::size_t> layers;
    for (std::size_t l = 1; l <= model.config.layers; ++l) {
        if (group_index(l, model.config.layers, model.config.groups) == g) {
            layers.push_back(l);
        }
    }
    if (layers.size() < 2) {
        throw numeric_error("coefficient_similarity: group " + std::to_string(g) +
                            " has fewer than 2 layers");
    }
    std::vector<std::vector<double>> vecs;
    for (std::size_t l : layers) vecs.push_back(layer_coefficient_vector(model, l));
    Tensor sim({layers.size(), layers.size()});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        for (std::size_t j = i; j < layers.size(); ++j) {
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (std::size_t k = 0; k < vecs[i].size(); ++k) {
                dot += vecs[i][k] * vecs[j][k];
                ni += vecs[i][k] * vecs[i][k];
                nj += vecs[j][k] * vecs[j][k];
            }
            if (ni == 0.0 || nj == 0.0) {
                throw numeric_error("coefficient_similarity: zero coefficient vector");
            }
            const double s = i == j ? 1.0 : dot / std::sqrt(ni * nj);
            sim(i, j) = s;
            sim(j, i) = s;
        }
    }
    return sim;
}

struct GroupDiagnostics {
    std::size_t group = 0;
    double avg_frobenius = 0.0;
    double avg_entropy = 0.0;
    std::vector<std::size_t> layers;
    Tensor similarity; // empty when the group has < 2 layers
};

struct DiagnosticsReport {
    std::vector<GroupDiagnostics> groups;
};

inline DiagnosticsReport run_diagnostics(const RecastModel& model) {
    DiagnosticsReport report;
    for (std::size_t g = 1; g <= model.config.groups; ++g) {
        GroupDiagnostics gd;
        gd.group = g;
        const TemplateBank& bank = *model.banks[g - 1];
        gd.avg_frobenius = bank.templates.size() >= 2 ? frobenius_diversity(bank) : 0.0;
        gd.avg_entropy = sv_entropy(bank);
        for (std::size_t l = 1; l <= model.config.layers; ++l) {
            if (group_index(l, model.config.layers, model.config.groups) == g) {
                gd.layers.push_back(l);
            }
        }
        if (gd.layers.size() >= 2) gd.similarity = coefficient_similarity(model, g);
        report.groups.push_back(std::move(gd));
    }
    return report;
}

} // namespace recast

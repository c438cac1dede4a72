#pragma once

#include <cmath>
#include <string>

#include "recast/errors.hpp"
#include "recast/tensor.hpp"

namespace recast {

// Weight-level combinators merging a RECAST-generated weight with adapter
// updates. All are pure; with adapter parameters at their identity element
// (B = 0, M = 1, S = 0) each returns W_recast bit-exactly.

inline void require_binary(const Tensor& m, const char* name) {
    for (std::size_t i = 0; i < m.numel(); ++i) {
        if (m[i] != 0.0 && m[i] != 1.0) {
            throw value_error(std::string(name) + ": mask entries must be 0 or 1");
        }
    }
}

/// W = W_recast + B·A (LoRA).
inline Tensor combine_lora(const Tensor& w_recast, const Tensor& b, const Tensor& a) {
    if (w_recast.rank() != 2 || b.rank() != 2 || a.rank() != 2 ||
        b.rows() != w_recast.rows() || a.cols() != w_recast.cols() || b.cols() != a.rows()) {
        throw shape_error("combine_lora: shapes not conformable");
    }
    bool b_zero = true;
    for (std::size_t i = 0; i < b.numel() && b_zero; ++i) b_zero = b[i] == 0.0;
    if (b_zero) return w_recast; // identity adapter, bit-exact
    return tensor_add(w_recast, tensor_matmul(b, a));
}

/// W = W_recast ⊙ M (PiggyBack-style binary masking).
inline Tensor combine_mask(const Tensor& w_recast, const Tensor& m) {
    require_same_shape(w_recast, m, "combine_mask");
    require_binary(m, "combine_mask");
    bool all_ones = true;
    for (std::size_t i = 0; i < m.numel() && all_ones; ++i) all_ones = m[i] == 1.0;
    if (all_ones) return w_recast;
    return tensor_mul(w_recast, m);
}

/// W = |W_recast| · (W_recast + BA)/|W_recast + BA| with |·| the whole-matrix
/// Frobenius norm; set column_wise for the per-column magnitude variant.
inline Tensor combine_dora(const Tensor& w_recast, const Tensor& b, const Tensor& a,
                           bool column_wise = false) {
    if (w_recast.rank() != 2 || b.rank() != 2 || a.rank() != 2 ||
        b.rows() != w_recast.rows() || a.cols() != w_recast.cols() || b.cols() != a.rows()) {
        throw shape_error("combine_dora: shapes not conformable");
    }
    bool b_zero = true;
    for (std::size_t i = 0; i < b.numel() && b_zero; ++i) b_zero = b[i] == 0.0;
    if (b_zero) {
        if (frobenius_norm(w_recast) == 0.0) {
            throw numeric_error("combine_dora: zero-norm direction term");
        }
        return w_recast; // norms cancel exactly
    }
    const Tensor direction = tensor_add(w_recast, tensor_matmul(b, a));
    if (!column_wise) {
        const double dn = frobenius_norm(direction);
        if (dn == 0.0) throw numeric_error("combine_dora: zero-norm direction term");
        return tensor_scale(direction, frobenius_norm(w_recast) / dn);
    }
    Tensor out(direction.shape());
    for (std::size_t c = 0; c < direction.cols(); ++c) {
        double wn = 0.0, dn = 0.0;
        for (std::size_t r = 0; r < direction.rows(); ++r) {
            wn += w_recast(r, c) * w_recast(r, c);
            dn += direction(r, c) * direction(r, c);
        }
        if (dn == 0.0) throw numeric_error("combine_dora: zero-norm direction column");
        const double s = std::sqrt(wn / dn);
        for (std::size_t r = 0; r < direction.rows(); ++r) out(r, c) = s * direction(r, c);
    }
    return out;
}

/// W = W_recast + S ⊙ W_recast + B·A (RoSA, as written).
inline Tensor combine_rosa(const Tensor& w_recast, const Tensor& s, const Tensor& b,
                           const Tensor& a) {
    require_same_shape(w_recast, s, "combine_rosa");
    require_binary(s, "combine_rosa");
    if (b.rank() != 2 || a.rank() != 2 || b.rows() != w_recast.rows() ||
        a.cols() != w_recast.cols() || b.cols() != a.rows()) {
        throw shape_error("combine_rosa: shapes not conformable");
    }
    bool s_zero = true;
    for (std::size_t i = 0; i < s.numel() && s_zero; ++i) s_zero = s[i] == 0.0;
    bool b_zero = true;
    for (std::size_t i = 0; i < b.numel() && b_zero; ++i) b_zero = b[i] == 0.0;
    if (s_zero && b_zero) return w_recast;
    Tensor out = tensor_add(w_recast, tensor_mul(s, w_recast));
    if (!b_zero) out = tensor_add(out, tensor_matmul(b, a));
    return out;
}

} // namespace recast

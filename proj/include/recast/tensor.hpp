#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "recast/errors.hpp"

namespace recast {

/// Dense row-major tensor of 64-bit floats.
///
/// Values are checked for finiteness at construction; gradient buffers may
/// opt out via the `allow_nonfinite` flag.
class Tensor {
  public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data,
           bool allow_nonfinite = false)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_)) {
            throw shape_error("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
        if (!allow_nonfinite) {
            for (double v : data_) {
                if (!std::isfinite(v)) {
                    throw value_error("non-finite value in tensor construction");
                }
            }
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    /// d x d identity matrix.
    static Tensor identity(std::size_t d) {
        Tensor t({d, d});
        for (std::size_t i = 0; i < d; ++i) t.data_[i * d + i] = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::size_t rows() const { require_rank(2); return shape_[0]; }
    std::size_t cols() const { require_rank(2); return shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    double at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

  private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw shape_error("tensor shape must be nonempty");
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw shape_error("tensor extents must be positive");
            n *= e;
        }
        return n;
    }

    void require_rank(std::size_t r) const {
        if (shape_.size() != r) {
            throw shape_error("expected rank-" + std::to_string(r) + " tensor, got " +
                              shape_string());
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw shape_error(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
    }
}

// --- plain (non-differentiable) tensor arithmetic -------------------------

inline Tensor tensor_add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Tensor tensor_sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Tensor tensor_mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

inline Tensor tensor_scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

inline Tensor tensor_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw shape_error("matmul: incompatible shapes " + a.shape_string() + " and " +
                          b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
        }
    }
    return out;
}

inline double tensor_dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw shape_error("dot: element counts differ " + a.shape_string() + " vs " +
                          b.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

inline double frobenius_norm(const Tensor& a) { return std::sqrt(tensor_dot(a, a)); }

} // namespace recast

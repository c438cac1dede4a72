#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "recast/errors.hpp"
#include "recast/tensor.hpp"

namespace recast {

enum class Reduction { Mean, Sum };

/// Reverse-mode differentiation tape.
///
/// Nodes are recorded in creation order; backward() walks them in reverse,
/// which is a valid topological order by construction. Leaf nodes hold
/// parameters (or constants); their `grad` buffers accumulate across repeated
/// backward calls. Leaves created non-trainable never receive gradient.
class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;   // persistent accumulator, meaningful for leaves
        bool leaf = false;
        bool trainable = false;
        // Adds this node's contribution to its parents' transient gradients.
        std::function<void(const Tensor& g, std::vector<Tensor>& acc)> backward;
    };

    struct Value {
        Tape* tape = nullptr;
        std::size_t idx = 0;
        const Tensor& val() const { return tape->node(idx).value; }
    };

    Value leaf(const Tensor& t, bool trainable = true) {
        Node n;
        n.value = t;
        n.grad = Tensor(t.shape());
        n.leaf = true;
        n.trainable = trainable;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Value constant(const Tensor& t) { return leaf(t, false); }

    Value record(Tensor value, std::function<void(const Tensor&, std::vector<Tensor>&)> bw) {
        Node n;
        n.value = std::move(value);
        n.grad = Tensor(n.value.shape());
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Node& node(std::size_t i) { return nodes_[i]; }
    const Node& node(std::size_t i) const { return nodes_[i]; }

    const Tensor& grad(Value v) const { return nodes_[v.idx].grad; }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    }

    /// Populates gradients of all ancestors of `loss`. Repeated calls without
    /// zero_grad() accumulate.
    void backward(Value loss) {
        const Node& ln = nodes_[loss.idx];
        if (ln.value.numel() != 1) {
            throw shape_error("backward: loss must be scalar, got " + ln.value.shape_string());
        }
        std::vector<Tensor> acc(nodes_.size());
        acc[loss.idx] = Tensor::scalar(1.0);
        for (std::size_t i = loss.idx + 1; i-- > 0;) {
            if (acc[i].numel() == 0) continue;
            Node& n = nodes_[i];
            if (!n.leaf || n.trainable) {
                for (std::size_t k = 0; k < acc[i].numel(); ++k) n.grad[k] += acc[i][k];
            }
            if (n.backward) n.backward(acc[i], acc);
        }
    }

    /// Transient-gradient accumulation helper for backward closures.
    static void accum(std::vector<Tensor>& acc, std::size_t idx, const Tensor& g) {
        if (acc[idx].numel() == 0) {
            acc[idx] = g;
        } else {
            for (std::size_t i = 0; i < g.numel(); ++i) acc[idx][i] += g[i];
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
};

using Value = Tape::Value;

namespace ops {

inline Tape& tape_of(Value a) { return *a.tape; }

inline Value add(Value a, Value b) {
    Tensor out = tensor_add(a.val(), b.val());
    auto ai = a.idx, bi = b.idx;
    return tape_of(a).record(std::move(out), [ai, bi](const Tensor& g, std::vector<Tensor>& acc) {
        Tape::accum(acc, ai, g);
        Tape::accum(acc, bi, g);
    });
}

inline Value sub(Value a, Value b) {
    Tensor out = tensor_sub(a.val(), b.val());
    auto ai = a.idx, bi = b.idx;
    return tape_of(a).record(std::move(out), [ai, bi](const Tensor& g, std::vector<Tensor>& acc) {
        Tape::accum(acc, ai, g);
        Tensor neg(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) neg[i] = -g[i];
        Tape::accum(acc, bi, neg);
    });
}

inline Value mul(Value a, Value b) {
    Tensor out = tensor_mul(a.val(), b.val());
    auto ai = a.idx, bi = b.idx;
    Tensor av = a.val(), bv = b.val();
    return tape_of(a).record(std::move(out),
                             [ai, bi, av, bv](const Tensor& g, std::vector<Tensor>& acc) {
                                 Tensor ga(g.shape()), gb(g.shape());
                                 for (std::size_t i = 0; i < g.numel(); ++i) {
                                     ga[i] = g[i] * bv[i];
                                     gb[i] = g[i] * av[i];
                                 }
                                 Tape::accum(acc, ai, ga);
                                 Tape::accum(acc, bi, gb);
                             });
}

inline Value scale(Value a, double s) {
    Tensor out = tensor_scale(a.val(), s);
    auto ai = a.idx;
    return tape_of(a).record(std::move(out), [ai, s](const Tensor& g, std::vector<Tensor>& acc) {
        Tape::accum(acc, ai, tensor_scale(g, s));
    });
}

inline Value relu(Value a) {
    Tensor out(a.val().shape());
    const Tensor& av = a.val();
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    auto ai = a.idx;
    Tensor saved = av;
    return tape_of(a).record(std::move(out),
                             [ai, saved](const Tensor& g, std::vector<Tensor>& acc) {
                                 Tensor ga(g.shape());
                                 for (std::size_t i = 0; i < g.numel(); ++i) {
                                     ga[i] = saved[i] > 0.0 ? g[i] : 0.0;
                                 }
                                 Tape::accum(acc, ai, ga);
                             });
}

// Tanh-approximation GELU:
//   gelu(x) = 0.5 x (1 + tanh(c (x + a x^3))),  c = sqrt(2/pi), a = 0.044715
inline double gelu_scalar(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    const double u = c * (x + a * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * a * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Value gelu(Value a) {
    Tensor out(a.val().shape());
    const Tensor& av = a.val();
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = gelu_scalar(av[i]);
    auto ai = a.idx;
    Tensor saved = av;
    return tape_of(a).record(std::move(out),
                             [ai, saved](const Tensor& g, std::vector<Tensor>& acc) {
                                 Tensor ga(g.shape());
                                 for (std::size_t i = 0; i < g.numel(); ++i) {
                                     ga[i] = g[i] * gelu_grad_scalar(saved[i]);
                                 }
                                 Tape::accum(acc, ai, ga);
                             });
}

/// Standard matrix product. Gradients: dA = dY Bᵀ, dB = Aᵀ dY.
inline Value matmul(Value a, Value b) {
    Tensor out = tensor_matmul(a.val(), b.val());
    auto ai = a.idx, bi = b.idx;
    Tensor av = a.val(), bv = b.val();
    return tape_of(a).record(std::move(out),
                             [ai, bi, av, bv](const Tensor& g, std::vector<Tensor>& acc) {
                                 const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
                                 Tensor ga({m, k});
                                 for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < n; ++j) {
                                         const double gv = g(i, j);
                                         for (std::size_t p = 0; p < k; ++p)
                                             ga(i, p) += gv * bv(p, j);
                                     }
                                 Tensor gb({k, n});
                                 for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t p = 0; p < k; ++p) {
                                         const double avv = av(i, p);
                                         for (std::size_t j = 0; j < n; ++j)
                                             gb(p, j) += avv * g(i, j);
                                     }
                                 Tape::accum(acc, ai, ga);
                                 Tape::accum(acc, bi, gb);
                             });
}

/// Fused affine map y = x Wᵀ + b with x: [B x d_in], W: [d_out x d_in],
/// b: [d_out]; the layout used by every fully-connected module.
inline Value linear(Value x, Value w, Value b) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const Tensor& bv = b.val();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.cols()) {
        throw shape_error("linear: incompatible shapes " + xv.shape_string() + " and " +
                          wv.shape_string());
    }
    if (bv.numel() != wv.rows()) {
        throw shape_error("linear: bias length " + std::to_string(bv.numel()) +
                          " != d_out " + std::to_string(wv.rows()));
    }
    const std::size_t B = xv.rows(), din = xv.cols(), dout = wv.rows();
    Tensor out({B, dout});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t o = 0; o < dout; ++o) {
            double s = bv[o];
            for (std::size_t p = 0; p < din; ++p) s += xv(i, p) * wv(o, p);
            out(i, o) = s;
        }
    auto xi = x.idx, wi = w.idx, bi = b.idx;
    Tensor xs = xv, ws = wv;
    return tape_of(x).record(
        std::move(out), [xi, wi, bi, xs, ws](const Tensor& g, std::vector<Tensor>& acc) {
            const std::size_t B = xs.rows(), din = xs.cols(), dout = ws.rows();
            Tensor gx({B, din}), gw({dout, din}), gb({dout});
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t o = 0; o < dout; ++o) {
                    const double gv = g(i, o);
                    gb[o] += gv;
                    for (std::size_t p = 0; p < din; ++p) {
                        gx(i, p) += gv * ws(o, p);
                        gw(o, p) += gv * xs(i, p);
                    }
                }
            Tape::accum(acc, xi, gx);
            Tape::accum(acc, wi, gw);
            Tape::accum(acc, bi, gb);
        });
}

/// Direct cross-correlation. x: [B x Cin x H x W], w: [Cout x Cin x Kh x Kw].
inline Value conv2d(Value x, Value w, std::size_t stride = 1, std::size_t padding = 0) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw shape_error("conv2d: expected rank-4 input and kernel");
    }
    const std::size_t B = xv.shape()[0], Cin = xv.shape()[1], H = xv.shape()[2],
                      W = xv.shape()[3];
    const std::size_t Cout = wv.shape()[0], Kh = wv.shape()[2], Kw = wv.shape()[3];
    if (wv.shape()[1] != Cin) {
        throw shape_error("conv2d: channel mismatch " + xv.shape_string() + " vs " +
                          wv.shape_string());
    }
    if (H + 2 * padding < Kh || W + 2 * padding < Kw ||
        (H + 2 * padding - Kh) % stride != 0 || (W + 2 * padding - Kw) % stride != 0) {
        throw shape_error("conv2d: non-integral output extent");
    }
    const std::size_t Ho = (H + 2 * padding - Kh) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - Kw) / stride + 1;
    Tensor out({B, Cout, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Cout; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < Cin; ++c)
                        for (std::size_t u = 0; u < Kh; ++u)
                            for (std::size_t v = 0; v < Kw; ++v) {
                                const std::ptrdiff_t hi =
                                    static_cast<std::ptrdiff_t>(i * stride + u) -
                                    static_cast<std::ptrdiff_t>(padding);
                                const std::ptrdiff_t wi_ =
                                    static_cast<std::ptrdiff_t>(j * stride + v) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (hi < 0 || wi_ < 0 || hi >= static_cast<std::ptrdiff_t>(H) ||
                                    wi_ >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                s += xv.at4(b, c, hi, wi_) * wv.at4(o, c, u, v);
                            }
                    out.at4(b, o, i, j) = s;
                }
    auto xi = x.idx, wi = w.idx;
    Tensor xs = xv, ws = wv;
    return tape_of(x).record(
        std::move(out),
        [xi, wi, xs, ws, stride, padding](const Tensor& g, std::vector<Tensor>& acc) {
            const std::size_t B = xs.shape()[0], Cin = xs.shape()[1], H = xs.shape()[2],
                              W = xs.shape()[3];
            const std::size_t Cout = ws.shape()[0], Kh = ws.shape()[2], Kw = ws.shape()[3];
            const std::size_t Ho = g.shape()[2], Wo = g.shape()[3];
            Tensor gx(xs.shape()), gw(ws.shape());
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < Cout; ++o)
                    for (std::size_t i = 0; i < Ho; ++i)
                        for (std::size_t j = 0; j < Wo; ++j) {
                            const double gv = g.at4(b, o, i, j);
                            if (gv == 0.0) continue;
                            for (std::size_t c = 0; c < Cin; ++c)
                                for (std::size_t u = 0; u < Kh; ++u)
                                    for (std::size_t v = 0; v < Kw; ++v) {
                                        const std::ptrdiff_t hi =
                                            static_cast<std::ptrdiff_t>(i * stride + u) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        const std::ptrdiff_t wi_ =
                                            static_cast<std::ptrdiff_t>(j * stride + v) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        if (hi < 0 || wi_ < 0 ||
                                            hi >= static_cast<std::ptrdiff_t>(H) ||
                                            wi_ >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        gx.at4(b, c, hi, wi_) += gv * ws.at4(o, c, u, v);
                                        gw.at4(o, c, u, v) += gv * xs.at4(b, c, hi, wi_);
                                    }
                        }
            Tape::accum(acc, xi, gx);
            Tape::accum(acc, wi, gw);
        });
}

inline Value sum(Value a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    auto ai = a.idx;
    std::vector<std::size_t> shape = a.val().shape();
    return tape_of(a).record(Tensor::scalar(s),
                             [ai, shape](const Tensor& g, std::vector<Tensor>& acc) {
                                 Tape::accum(acc, ai, Tensor::full(shape, g[0]));
                             });
}

/// Mean over batch of -log softmax(logits)[label]; log-sum-exp stabilized.
inline Value softmax_cross_entropy(Value logits, const std::vector<std::size_t>& labels) {
    const Tensor& lv = logits.val();
    if (lv.rank() != 2) throw shape_error("softmax_cross_entropy: logits must be 2-D");
    const std::size_t B = lv.rows(), C = lv.cols();
    if (labels.size() != B) {
        throw shape_error("softmax_cross_entropy: label count != batch size");
    }
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] >= C) {
            throw value_error("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                              " out of range [0," + std::to_string(C) + ")");
        }
    }
    Tensor probs({B, C});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double mx = lv(b, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, lv(b, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(lv(b, c) - mx);
        const double logz = std::log(z) + mx;
        for (std::size_t c = 0; c < C; ++c) probs(b, c) = std::exp(lv(b, c) - logz);
        loss -= lv(b, labels[b]) - logz;
    }
    loss /= static_cast<double>(B);
    auto li = logits.idx;
    return tape_of(logits).record(
        Tensor::scalar(loss), [li, probs, labels](const Tensor& g, std::vector<Tensor>& acc) {
            const std::size_t B = probs.rows(), C = probs.cols();
            Tensor gl({B, C});
            const double s = g[0] / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    gl(b, c) = s * (probs(b, c) - (labels[b] == c ? 1.0 : 0.0));
            Tape::accum(acc, li, gl);
        });
}

/// Smooth L1 (Huber-style) discrepancy between a and b.
inline Value smooth_l1(Value a, Value b, double beta = 1.0,
                       Reduction reduction = Reduction::Mean) {
    require_same_shape(a.val(), b.val(), "smooth_l1");
    if (beta <= 0.0) throw value_error("smooth_l1: beta must be positive");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    const std::size_t N = av.numel();
    const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(N) : 1.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double x = av[i] - bv[i];
        loss += std::fabs(x) < beta ? 0.5 * x * x / beta : std::fabs(x) - 0.5 * beta;
    }
    loss *= norm;
    auto ai = a.idx, bi = b.idx;
    Tensor as = av, bs = bv;
    return tape_of(a).record(
        Tensor::scalar(loss),
        [ai, bi, as, bs, beta, norm](const Tensor& g, std::vector<Tensor>& acc) {
            Tensor ga(as.shape());
            for (std::size_t i = 0; i < as.numel(); ++i) {
                const double x = as[i] - bs[i];
                const double d = std::fabs(x) < beta ? x / beta : (x > 0.0 ? 1.0 : -1.0);
                ga[i] = g[0] * norm * d;
            }
            Tensor gb = tensor_scale(ga, -1.0);
            Tape::accum(acc, ai, ga);
            Tape::accum(acc, bi, gb);
        });
}

inline Value mse(Value a, Value b, Reduction reduction = Reduction::Mean) {
    require_same_shape(a.val(), b.val(), "mse");
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    const std::size_t N = av.numel();
    const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(N) : 1.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double x = av[i] - bv[i];
        loss += x * x;
    }
    loss *= norm;
    auto ai = a.idx, bi = b.idx;
    Tensor as = av, bs = bv;
    return tape_of(a).record(Tensor::scalar(loss),
                             [ai, bi, as, bs, norm](const Tensor& g, std::vector<Tensor>& acc) {
                                 Tensor ga(as.shape());
                                 for (std::size_t i = 0; i < as.numel(); ++i) {
                                     ga[i] = g[0] * norm * 2.0 * (as[i] - bs[i]);
                                 }
                                 Tensor gb = tensor_scale(ga, -1.0);
                                 Tape::accum(acc, ai, ga);
                                 Tape::accum(acc, bi, gb);
                             });
}

/// W = (1/K) Σ_k Σ_i C[k][i] · T_i, differentiable w.r.t. both coefficients
/// and templates:
///   dC[k][i] = (1/K) <dW, T_i>,   dT_i = (1/K) Σ_k C[k][i] · dW.
inline Value generate_weight(const std::vector<Value>& templates, Value coeffs) {
    if (templates.empty()) throw value_error("generate_weight: empty template bank");
    const Tensor& cv = coeffs.val();
    if (cv.rank() != 2) throw shape_error("generate_weight: coefficients must be K x n");
    const std::size_t K = cv.rows(), n = cv.cols();
    if (n != templates.size()) {
        throw shape_error("generate_weight: coefficient width " + std::to_string(n) +
                          " != bank size " + std::to_string(templates.size()));
    }
    const std::vector<std::size_t> wshape = templates[0].val().shape();
    for (const auto& t : templates) {
        if (t.val().shape() != wshape) {
            throw shape_error("generate_weight: templates must share one shape");
        }
    }
    Tensor out(wshape);
    const double invK = 1.0 / static_cast<double>(K);
    for (std::size_t i = 0; i < n; ++i) {
        double a = 0.0;
        for (std::size_t k = 0; k < K; ++k) a += cv(k, i);
        a *= invK;
        const Tensor& tv = templates[i].val();
        for (std::size_t j = 0; j < out.numel(); ++j) out[j] += a * tv[j];
    }
    std::vector<std::size_t> tidx(n);
    std::vector<Tensor> tvals(n);
    for (std::size_t i = 0; i < n; ++i) {
        tidx[i] = templates[i].idx;
        tvals[i] = templates[i].val();
    }
    auto ci = coeffs.idx;
    Tensor cs = cv;
    return tape_of(coeffs).record(
        std::move(out),
        [ci, cs, tidx, tvals, K, n, invK](const Tensor& g, std::vector<Tensor>& acc) {
            Tensor gc({K, n});
            for (std::size_t i = 0; i < n; ++i) {
                const double dp = tensor_dot(g, tvals[i]) * invK;
                for (std::size_t k = 0; k < K; ++k) gc(k, i) = dp;
                double a = 0.0;
                for (std::size_t k = 0; k < K; ++k) a += cs(k, i);
                Tape::accum(acc, tidx[i], tensor_scale(g, a * invK));
            }
            Tape::accum(acc, ci, gc);
        });
}

} // namespace ops

} // namespace recast

#pragma once

#include <functional>
#include <memory>

#include "tensor.hpp"

namespace certlip {

/// Reverse-mode gradient tape. Operations append nodes in execution order;
/// backward() replays the pull closures in exact reverse order, so gradient
/// accumulation is deterministic.
struct GradTape {
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily on first accumulation
        bool needs_grad = false;
        bool has_grad = false;
        std::function<void(GradTape&, int)> pull;  // empty for leaves
    };

    std::vector<Node> nodes;
    bool round_f32 = false;  // emulate float32 forward values (training-only mode)

    int add_leaf(Tensor v, bool needs_grad) {
        ensure_finite(v, "tape leaf");
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        nodes.push_back(std::move(n));
        return int(nodes.size()) - 1;
    }
    int add_const(Tensor v) { return add_leaf(std::move(v), false); }

    int add_op(Tensor v, const std::vector<int>& parents, std::function<void(GradTape&, int)> pull) {
        Node n;
        n.value = std::move(v);
        if (round_f32)
            for (double& x : n.value.data) x = double(float(x));
        for (int p : parents)
            if (nodes[size_t(p)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.pull = std::move(pull);
        nodes.push_back(std::move(n));
        return int(nodes.size()) - 1;
    }

    const Tensor& val(int id) const { return nodes[size_t(id)].value; }
    bool wants(int id) const { return nodes[size_t(id)].needs_grad; }

    void accumulate(int id, const Tensor& g) {
        Node& n = nodes[size_t(id)];
        if (!n.needs_grad) return;
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape);
            n.has_grad = true;
        }
        axpy(n.grad, 1.0, g);
    }

    void backward(int loss_id) {
        Node& loss = nodes[size_t(loss_id)];
        if (loss.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!loss.needs_grad) throw std::invalid_argument("backward: loss does not require grad");
        loss.grad = Tensor::scalar(1.0);
        loss.has_grad = true;
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes[size_t(i)];
            if (n.pull && n.has_grad) n.pull(*this, i);
        }
        for (auto& n : nodes)
            if (n.has_grad && !n.grad.all_finite())
                throw std::runtime_error("backward: non-finite gradient");
    }

    /// Gradient of the last backward() target with respect to node `id`.
    Tensor grad_of(int id) const {
        const Node& n = nodes[size_t(id)];
        if (!n.needs_grad)
            throw std::runtime_error("grad_of: node was not tracked for gradients");
        if (!n.has_grad) return Tensor(n.value.shape);
        return n.grad;
    }
};

// ---------------------------------------------------------------------------
// Tape-recorded operations
// ---------------------------------------------------------------------------

inline int t_conv2d(GradTape& tape, int x, int k, size_t stride, size_t pad) {
    Tensor y = conv2d(tape.val(x), tape.val(k), stride, pad);
    return tape.add_op(std::move(y), {x, k}, [x, k, stride, pad](GradTape& t, int self) {
        const Tensor& g = t.nodes[size_t(self)].grad;
        if (t.wants(x)) t.accumulate(x, conv2d_adjoint(g, t.val(k), stride, pad, t.val(x).shape));
        if (t.wants(k)) t.accumulate(k, conv2d_kernel_grad(t.val(x), g, stride, pad, t.val(k).shape));
    });
}

inline int t_dense(GradTape& tape, int x, int w, int b = -1) {
    const Tensor* bias = b >= 0 ? &tape.val(b) : nullptr;
    Tensor y = dense_apply(tape.val(x), tape.val(w), bias);
    return tape.add_op(std::move(y), b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w},
                       [x, w, b](GradTape& t, int self) {
                           const Tensor& g = t.nodes[size_t(self)].grad;
                           const Tensor& xin = t.val(x);
                           const Tensor& wt = t.val(w);
                           const size_t N = xin.dim(0), d = xin.dim(1), m = wt.dim(0);
                           if (t.wants(x)) {
                               Tensor gx({N, d});
                               for (size_t n = 0; n < N; ++n)
                                   for (size_t j = 0; j < m; ++j) {
                                       const double gv = g[n * m + j];
                                       if (gv == 0.0) continue;
                                       for (size_t kk = 0; kk < d; ++kk)
                                           gx[n * d + kk] += gv * wt[j * d + kk];
                                   }
                               t.accumulate(x, gx);
                           }
                           if (t.wants(w)) {
                               Tensor gw({m, d});
                               for (size_t n = 0; n < N; ++n)
                                   for (size_t j = 0; j < m; ++j) {
                                       const double gv = g[n * m + j];
                                       if (gv == 0.0) continue;
                                       for (size_t kk = 0; kk < d; ++kk)
                                           gw[j * d + kk] += gv * xin[n * d + kk];
                                   }
                               t.accumulate(w, gw);
                           }
                           if (b >= 0 && t.wants(b)) {
                               Tensor gb({m});
                               for (size_t n = 0; n < N; ++n)
                                   for (size_t j = 0; j < m; ++j) gb[j] += g[n * m + j];
                               t.accumulate(b, gb);
                           }
                       });
}

inline int t_minmax(GradTape& tape, int x) {
    auto route = std::make_shared<std::vector<uint8_t>>();
    Tensor y = minmax_apply(tape.val(x), route.get());
    return tape.add_op(std::move(y), {x}, [x, route](GradTape& t, int self) {
        t.accumulate(x, minmax_backward(t.nodes[size_t(self)].grad, *route));
    });
}

inline int t_add(GradTape& tape, int a, int b) {
    Tensor y = add(tape.val(a), tape.val(b));
    return tape.add_op(std::move(y), {a, b}, [a, b](GradTape& t, int self) {
        const Tensor& g = t.nodes[size_t(self)].grad;
        if (t.wants(a)) t.accumulate(a, g);
        if (t.wants(b)) t.accumulate(b, g);
    });
}

inline int t_scale(GradTape& tape, int a, double c) {
    Tensor y = scaled(tape.val(a), c);
    return tape.add_op(std::move(y), {a}, [a, c](GradTape& t, int self) {
        t.accumulate(a, scaled(t.nodes[size_t(self)].grad, c));
    });
}

/// y[n,c,...] = factor * beta[c] * x[n,c,...]
inline int t_channel_scale(GradTape& tape, int x, int beta, double factor) {
    const Tensor& xv = tape.val(x);
    const Tensor& bv = tape.val(beta);
    if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
        throw std::invalid_argument("t_channel_scale: beta must match channel axis");
    const size_t N = xv.dim(0), C = xv.dim(1);
    size_t inner = 1;
    for (size_t i = 2; i < xv.rank(); ++i) inner *= xv.dim(i);
    Tensor y(xv.shape);
    for (size_t n = 0; n < N; ++n)
        for (size_t c = 0; c < C; ++c) {
            const double s = factor * bv[c];
            const size_t base = (n * C + c) * inner;
            for (size_t i = 0; i < inner; ++i) y[base + i] = s * xv.data[base + i];
        }
    return tape.add_op(std::move(y), {x, beta}, [x, beta, factor, N, C, inner](GradTape& t, int self) {
        const Tensor& g = t.nodes[size_t(self)].grad;
        const Tensor& xv2 = t.val(x);
        const Tensor& bv2 = t.val(beta);
        if (t.wants(x)) {
            Tensor gx(xv2.shape);
            for (size_t n = 0; n < N; ++n)
                for (size_t c = 0; c < C; ++c) {
                    const double s = factor * bv2[c];
                    const size_t base = (n * C + c) * inner;
                    for (size_t i = 0; i < inner; ++i) gx[base + i] = s * g[base + i];
                }
            t.accumulate(x, gx);
        }
        if (t.wants(beta)) {
            Tensor gb({C});
            for (size_t n = 0; n < N; ++n)
                for (size_t c = 0; c < C; ++c) {
                    const size_t base = (n * C + c) * inner;
                    double acc = 0.0;
                    for (size_t i = 0; i < inner; ++i) acc += g[base + i] * xv2.data[base + i];
                    gb[c] += factor * acc;
                }
            t.accumulate(beta, gb);
        }
    });
}

/// k'[o,c,r,s] = factor * beta[o] * k[o,c,r,s]  (per-output-channel kernel scaling)
inline int t_kernel_channel_scale(GradTape& tape, int k, int beta, double factor) {
    const Tensor& kv = tape.val(k);
    const Tensor& bv = tape.val(beta);
    if (kv.rank() != 4 || bv.rank() != 1 || bv.dim(0) != kv.dim(0))
        throw std::invalid_argument("t_kernel_channel_scale: beta must match output channels");
    const size_t Co = kv.dim(0);
    const size_t inner = kv.numel() / Co;
    Tensor y(kv.shape);
    for (size_t o = 0; o < Co; ++o) {
        const double s = factor * bv[o];
        for (size_t i = 0; i < inner; ++i) y[o * inner + i] = s * kv.data[o * inner + i];
    }
    return tape.add_op(std::move(y), {k, beta}, [k, beta, factor, Co, inner](GradTape& t, int self) {
        const Tensor& g = t.nodes[size_t(self)].grad;
        const Tensor& kv2 = t.val(k);
        const Tensor& bv2 = t.val(beta);
        if (t.wants(k)) {
            Tensor gk(kv2.shape);
            for (size_t o = 0; o < Co; ++o) {
                const double s = factor * bv2[o];
                for (size_t i = 0; i < inner; ++i) gk[o * inner + i] = s * g[o * inner + i];
            }
            t.accumulate(k, gk);
        }
        if (t.wants(beta)) {
            Tensor gb({Co});
            for (size_t o = 0; o < Co; ++o) {
                double acc = 0.0;
                for (size_t i = 0; i < inner; ++i) acc += g[o * inner + i] * kv2.data[o * inner + i];
                gb[o] = factor * acc;
            }
            t.accumulate(beta, gb);
        }
    });
}

/// y = a + C for a constant tensor C (no gradient to C).
inline int t_add_const(GradTape& tape, int a, Tensor c) {
    Tensor y = add(tape.val(a), c);
    return tape.add_op(std::move(y), {a}, [a](GradTape& t, int self) {
        t.accumulate(a, t.nodes[size_t(self)].grad);
    });
}

inline int t_reshape(GradTape& tape, int x, Shape s) {
    Tensor y = tape.val(x).reshaped(s);
    Shape orig = tape.val(x).shape;
    return tape.add_op(std::move(y), {x}, [x, orig](GradTape& t, int self) {
        t.accumulate(x, t.nodes[size_t(self)].grad.reshaped(orig));
    });
}

/// Scalar Euclidean norm of a tensor. At x == 0 the subgradient 0 is used.
inline int t_l2norm(GradTape& tape, int x) {
    double v = l2_norm(tape.val(x));
    return tape.add_op(Tensor::scalar(v), {x}, [x, v](GradTape& t, int self) {
        if (v == 0.0) return;
        const double g0 = t.nodes[size_t(self)].grad[0];
        t.accumulate(x, scaled(t.val(x), g0 / v));
    });
}

inline int t_mul_scalar_nodes(GradTape& tape, int a, int b) {
    const double av = tape.val(a)[0], bv = tape.val(b)[0];
    return tape.add_op(Tensor::scalar(av * bv), {a, b}, [a, b, av, bv](GradTape& t, int self) {
        const double g0 = t.nodes[size_t(self)].grad[0];
        if (t.wants(a)) t.accumulate(a, Tensor::scalar(g0 * bv));
        if (t.wants(b)) t.accumulate(b, Tensor::scalar(g0 * av));
    });
}

/// Pairwise row-distance matrix scaled by a scalar node:
/// out[j,i] = ksub * ||W[j,:] - W[i,:]||_2. Zero diagonal, symmetric.
inline int t_margin_matrix(GradTape& tape, int w, int ksub) {
    const Tensor& wv = tape.val(w);
    if (wv.rank() != 2) throw std::invalid_argument("t_margin_matrix: weight must be [m,d]");
    const size_t m = wv.dim(0), d = wv.dim(1);
    const double kv = tape.val(ksub)[0];
    auto dist = std::make_shared<Tensor>(Shape{m, m});
    for (size_t j = 0; j < m; ++j)
        for (size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) {
                const double diff = wv[j * d + k] - wv[i * d + k];
                acc += diff * diff;
            }
            (*dist)[j * m + i] = std::sqrt(acc);
        }
    Tensor out = scaled(*dist, kv);
    return tape.add_op(std::move(out), {w, ksub}, [w, ksub, dist, kv, m, d](GradTape& t, int self) {
        const Tensor& g = t.nodes[size_t(self)].grad;
        const Tensor& wv2 = t.val(w);
        if (t.wants(w)) {
            Tensor gw({m, d});
            for (size_t j = 0; j < m; ++j)
                for (size_t i = 0; i < m; ++i) {
                    const double gv = g[j * m + i];
                    const double dn = (*dist)[j * m + i];
                    if (gv == 0.0 || dn == 0.0) continue;
                    const double s = kv * gv / dn;
                    for (size_t k = 0; k < d; ++k) {
                        const double diff = wv2[j * d + k] - wv2[i * d + k];
                        gw[j * d + k] += s * diff;
                        gw[i * d + k] -= s * diff;
                    }
                }
            t.accumulate(w, gw);
        }
        if (t.wants(ksub)) {
            double acc = 0.0;
            for (size_t i = 0; i < m * m; ++i) acc += g[i] * (*dist)[i];
            t.accumulate(ksub, Tensor::scalar(acc));
        }
    });
}

}  // namespace certlip

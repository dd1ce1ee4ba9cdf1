#pragma once

#include <functional>

#include "gloro.hpp"
#include "network.hpp"

namespace certlip {

// ---------------------------------------------------------------------------
// Conv layers as explicit matrices. Columns are images of basis vectors, so
// the result is the exact linear operator the layer applies.
// ---------------------------------------------------------------------------

inline Tensor materialize_conv_operator(const Tensor& kernel, const Shape& in_shape, size_t stride,
                                        size_t pad) {
    if (in_shape.size() != 3)
        throw std::invalid_argument("materialize_conv_operator: in_shape must be {C,H,W}");
    const size_t in_dim = in_shape[0] * in_shape[1] * in_shape[2];
    if (in_dim > 16384)
        throw std::invalid_argument("materialize_conv_operator: input dimension " +
                                    std::to_string(in_dim) + " exceeds the 16384 guard");
    Tensor basis({1, in_shape[0], in_shape[1], in_shape[2]});
    Tensor first = conv2d(basis, kernel, stride, pad);
    const size_t out_dim = first.numel();
    Tensor mat({out_dim, in_dim});
    for (size_t col = 0; col < in_dim; ++col) {
        basis.data.assign(in_dim, 0.0);
        basis[col] = 1.0;
        Tensor img = conv2d(basis, kernel, stride, pad);
        for (size_t row = 0; row < out_dim; ++row) mat[row * in_dim + col] = img[row];
    }
    return mat;
}

// ---------------------------------------------------------------------------
// Exact spectral norms of explicit matrices, by two independent methods.
// ---------------------------------------------------------------------------

namespace detail {

/// Gram matrix on the smaller side: M^T M or M M^T, whichever is smaller.
inline Tensor small_gram(const Tensor& mat) {
    const size_t R = mat.dim(0), C = mat.dim(1);
    const size_t D = std::min(R, C);
    Tensor g({D, D});
    if (C <= R) {
        for (size_t a = 0; a < D; ++a)
            for (size_t b = a; b < D; ++b) {
                double acc = 0.0;
                for (size_t r = 0; r < R; ++r) acc += mat[r * C + a] * mat[r * C + b];
                g[a * D + b] = acc;
                g[b * D + a] = acc;
            }
    } else {
        for (size_t a = 0; a < D; ++a)
            for (size_t b = a; b < D; ++b) {
                double acc = 0.0;
                for (size_t c = 0; c < C; ++c) acc += mat[a * C + c] * mat[b * C + c];
                g[a * D + b] = acc;
                g[b * D + a] = acc;
            }
    }
    return g;
}

}  // namespace detail

/// Dominant-eigenvalue iteration on the Gram matrix, run to a residual of
/// 1e-12 relative to the eigenvalue.
inline double exact_spectral_norm(const Tensor& mat, double tol = 1e-12, size_t cap = 2000000) {
    if (mat.rank() != 2) throw std::invalid_argument("exact_spectral_norm: matrix expected");
    Tensor g = detail::small_gram(mat);
    const size_t D = g.dim(0);
    double gmax = 0.0;
    for (double v : g.data) gmax = std::max(gmax, std::abs(v));
    if (gmax == 0.0) return 0.0;

    Rng rng(0x65696745ull);
    Tensor v = gaussian_tensor({D}, rng);
    double nv = l2_norm(v);
    for (double& x : v.data) x /= nv;
    Tensor gv({D});
    double lambda = 0.0;
    for (size_t it = 0; it < cap; ++it) {
        for (size_t a = 0; a < D; ++a) {
            double acc = 0.0;
            for (size_t b = 0; b < D; ++b) acc += g[a * D + b] * v[b];
            gv[a] = acc;
        }
        lambda = dot(v, gv);
        double res2 = 0.0;
        for (size_t a = 0; a < D; ++a) {
            const double r = gv[a] - lambda * v[a];
            res2 += r * r;
        }
        if (std::sqrt(res2) <= tol * std::max(lambda, gmax * 1e-300)) return std::sqrt(std::max(lambda, 0.0));
        const double n = l2_norm(gv);
        if (n == 0.0) return 0.0;
        for (size_t a = 0; a < D; ++a) v[a] = gv[a] / n;
    }
    throw std::runtime_error("exact_spectral_norm: eigen iteration failed to converge");
}

/// Full eigenvalue decomposition of the Gram matrix by cyclic Jacobi sweeps.
/// Independent of the iterative route; guarded to small matrices.
inline double exact_spectral_norm_jacobi(const Tensor& mat) {
    if (mat.rank() != 2) throw std::invalid_argument("exact_spectral_norm_jacobi: matrix expected");
    Tensor g = detail::small_gram(mat);
    const size_t D = g.dim(0);
    if (D > 512)
        throw std::invalid_argument("exact_spectral_norm_jacobi: dimension " + std::to_string(D) +
                                    " exceeds the 512 guard");
    double scale = 0.0;
    for (double v : g.data) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return 0.0;

    for (size_t sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < D; ++p)
            for (size_t q = p + 1; q < D; ++q) off += 2.0 * g[p * D + q] * g[p * D + q];
        if (std::sqrt(off) <= 1e-14 * scale * double(D)) {
            double best = 0.0;
            for (size_t i = 0; i < D; ++i) best = std::max(best, g[i * D + i]);
            return std::sqrt(std::max(best, 0.0));
        }
        for (size_t p = 0; p < D; ++p) {
            for (size_t q = p + 1; q < D; ++q) {
                const double gpq = g[p * D + q];
                if (gpq == 0.0) continue;
                const double theta = (g[q * D + q] - g[p * D + p]) / (2.0 * gpq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (size_t i = 0; i < D; ++i) {
                    const double gip = g[i * D + p], giq = g[i * D + q];
                    g[i * D + p] = c * gip - s * giq;
                    g[i * D + q] = s * gip + c * giq;
                }
                for (size_t i = 0; i < D; ++i) {
                    const double gpi = g[p * D + i], gqi = g[q * D + i];
                    g[p * D + i] = c * gpi - s * gqi;
                    g[q * D + i] = s * gpi + c * gqi;
                }
            }
        }
    }
    throw std::runtime_error("exact_spectral_norm_jacobi: failed to converge in 100 sweeps");
}

// ---------------------------------------------------------------------------
// L2 PGD attack on the margin objective max_{i != y} f_i - f_y.
// ---------------------------------------------------------------------------

struct PgdOpts {
    size_t steps = 200;
    size_t restarts = 5;
    double step_frac = 2.5;  // step size = step_frac * eps / steps
    uint64_t seed = 0x504744ull;
};

struct AttackOutcome {
    bool success = false;      // final argmax differs from the given prediction
    double final_margin = 0.0; // max_{i != y} f_i - f_y at the final point
    Tensor delta;              // perturbation achieving final_margin
};

namespace detail {

inline int t_margin_objective(GradTape& tape, int logits, const std::vector<int>& preds) {
    const Tensor& f = tape.val(logits);
    const size_t N = f.dim(0), m = f.dim(1);
    auto grad = std::make_shared<Tensor>(Shape{N, m});
    double total = 0.0;
    for (size_t n = 0; n < N; ++n) {
        const size_t y = size_t(preds[n]);
        size_t best = y == 0 ? 1 : 0;
        for (size_t i = 0; i < m; ++i)
            if (i != y && f[n * m + i] > f[n * m + best]) best = i;
        total += f[n * m + best] - f[n * m + y];
        (*grad)[n * m + best] += 1.0;
        (*grad)[n * m + y] -= 1.0;
    }
    return tape.add_op(Tensor::scalar(total), {logits}, [logits, grad](GradTape& t, int self) {
        t.accumulate(logits, scaled(*grad, t.nodes[size_t(self)].grad[0]));
    });
}

}  // namespace detail

/// Batched projected gradient descent inside the eps-ball. Success for a row
/// means the argmax at the final perturbed point differs from preds[n].
inline std::vector<AttackOutcome> pgd_attack(const Network& net, const Tensor& X,
                                             const std::vector<int>& preds, double eps,
                                             const PgdOpts& opts = {}) {
    if (X.rank() != 4) throw std::invalid_argument("pgd_attack: inputs must be [N,C,H,W]");
    if (preds.size() != X.dim(0)) throw std::invalid_argument("pgd_attack: prediction count mismatch");
    if (!(eps > 0)) throw std::invalid_argument("pgd_attack: eps must be positive");
    const size_t N = X.dim(0), d = X.numel() / N;
    const double alpha = opts.step_frac * eps / double(opts.steps);

    std::vector<AttackOutcome> out(N);
    for (auto& o : out) {
        o.delta = Tensor({1, X.dim(1), X.dim(2), X.dim(3)});
        o.final_margin = -std::numeric_limits<double>::infinity();
    }

    for (size_t r = 0; r < opts.restarts; ++r) {
        Tensor delta(X.shape);
        if (r > 0) {
            Rng rng(mix_seed(opts.seed, r));
            for (size_t n = 0; n < N; ++n) {
                double norm2 = 0.0;
                for (size_t i = 0; i < d; ++i) {
                    delta[n * d + i] = rng.gaussian();
                    norm2 += delta[n * d + i] * delta[n * d + i];
                }
                const double radius = eps * std::pow(rng.uniform(), 1.0 / double(d));
                const double s = norm2 > 0 ? radius / std::sqrt(norm2) : 0.0;
                for (size_t i = 0; i < d; ++i) delta[n * d + i] *= s;
            }
        }

        for (size_t step = 0; step < opts.steps; ++step) {
            GradTape tape;
            TapeBinding bind = bind_network(tape, net, false);
            int x_id = tape.add_leaf(add(X, delta), true);
            int logits = forward_on_tape(tape, net, bind, x_id);
            int obj = detail::t_margin_objective(tape, logits, preds);
            tape.backward(obj);
            Tensor g = tape.grad_of(x_id);
            for (size_t n = 0; n < N; ++n) {
                double gn = 0.0;
                for (size_t i = 0; i < d; ++i) gn += g[n * d + i] * g[n * d + i];
                gn = std::sqrt(gn);
                if (gn == 0.0) continue;
                double norm2 = 0.0;
                for (size_t i = 0; i < d; ++i) {
                    delta[n * d + i] += alpha * g[n * d + i] / gn;
                    norm2 += delta[n * d + i] * delta[n * d + i];
                }
                if (norm2 > eps * eps) {
                    const double s = eps / std::sqrt(norm2);
                    for (size_t i = 0; i < d; ++i) delta[n * d + i] *= s;
                }
            }
        }

        Tensor logits = forward(net, add(X, delta));
        const size_t m = logits.dim(1);
        for (size_t n = 0; n < N; ++n) {
            const size_t y = size_t(preds[n]);
            size_t best = y == 0 ? 1 : 0;
            size_t arg = 0;
            for (size_t i = 0; i < m; ++i) {
                if (i != y && logits[n * m + i] > logits[n * m + best]) best = i;
                if (logits[n * m + i] > logits[n * m + arg]) arg = i;
            }
            const double margin = logits[n * m + best] - logits[n * m + y];
            if (margin > out[n].final_margin) {
                out[n].final_margin = margin;
                for (size_t i = 0; i < d; ++i) out[n].delta[i] = delta[n * d + i];
            }
            if (arg != y) out[n].success = true;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Empirical Lipschitz lower bounds: every returned value is an actually
// attained difference quotient, so it must sit below any sound upper bound.
// ---------------------------------------------------------------------------

namespace detail {

inline int t_inner_const(GradTape& tape, int x, Tensor u) {
    const Tensor& xv = tape.val(x);
    if (xv.numel() != u.numel()) throw std::invalid_argument("t_inner_const: size mismatch");
    double v = 0.0;
    for (size_t i = 0; i < u.numel(); ++i) v += xv[i] * u[i];
    auto up = std::make_shared<Tensor>(std::move(u));
    return tape.add_op(Tensor::scalar(v), {x}, [x, up](GradTape& t, int self) {
        t.accumulate(x, scaled(up->reshaped(t.val(x).shape), t.nodes[size_t(self)].grad[0]));
    });
}

/// Shared machinery: maximize |<u(f(x2)) - u(f(x1))>| / ||x2 - x1|| where the
/// functional u is either the full logit difference direction (full == true)
/// or a fixed logit-pair difference.
inline double empirical_ratio_search(const Network& net, const Tensor& base, size_t pairs,
                                     size_t refine_steps, uint64_t seed, bool full, size_t cj,
                                     size_t ci) {
    if (base.dim(0) < 2) throw std::invalid_argument("empirical bound: need at least 2 base points");
    const size_t B = base.dim(0), d = base.numel() / B;
    const size_t m = net.num_classes();
    Rng rng(mix_seed(seed, 0x656D70ull));

    Tensor all_logits = forward(net, base);
    auto pair_value = [&](const double* f1, const double* f2) {
        if (full) {
            double acc = 0.0;
            for (size_t i = 0; i < m; ++i) acc += (f2[i] - f1[i]) * (f2[i] - f1[i]);
            return std::sqrt(acc);
        }
        return std::abs((f2[cj] - f2[ci]) - (f1[cj] - f1[ci]));
    };

    double best = 0.0;
    size_t bi = 0, bjj = 1;
    Tensor x2_best;
    bool x2_is_row = true;
    for (size_t p = 0; p < pairs; ++p) {
        const size_t i = size_t(rng.next_u64() % B);
        size_t j = size_t(rng.next_u64() % B);
        if (j == i) j = (j + 1) % B;
        double dist2 = 0.0;
        for (size_t k = 0; k < d; ++k) {
            const double diff = base[j * d + k] - base[i * d + k];
            dist2 += diff * diff;
        }
        if (dist2 == 0.0) continue;
        const double r = pair_value(all_logits.ptr() + i * m, all_logits.ptr() + j * m) / std::sqrt(dist2);
        if (r > best) {
            best = r;
            bi = i;
            bjj = j;
        }
    }
    // local slopes: jitter around base points
    for (size_t p = 0; p < std::min(pairs, B); ++p) {
        const size_t i = size_t(rng.next_u64() % B);
        Tensor x2({1, base.dim(1), base.dim(2), base.dim(3)});
        double dist2 = 0.0;
        for (size_t k = 0; k < d; ++k) {
            const double jit = 1e-3 * rng.gaussian();
            x2[k] = base[i * d + k] + jit;
            dist2 += jit * jit;
        }
        if (dist2 == 0.0) continue;
        Tensor f2 = forward(net, x2);
        const double r = pair_value(all_logits.ptr() + i * m, f2.ptr()) / std::sqrt(dist2);
        if (r > best) {
            best = r;
            bi = i;
            x2_best = x2;
            x2_is_row = false;
        }
    }

    // gradient-ascent refinement of the best pair, recomputing the true
    // quotient after every move so the result stays attained
    Tensor x1({1, base.dim(1), base.dim(2), base.dim(3)});
    for (size_t k = 0; k < d; ++k) x1[k] = base[bi * d + k];
    Tensor x2 = x2_is_row ? Tensor({1, base.dim(1), base.dim(2), base.dim(3)}) : x2_best;
    if (x2_is_row)
        for (size_t k = 0; k < d; ++k) x2[k] = base[bjj * d + k];
    Tensor f1 = forward(net, x1);

    for (size_t step = 0; step < refine_steps; ++step) {
        Tensor f2 = forward(net, x2);
        Tensor u({m});
        if (full) {
            double nrm = 0.0;
            for (size_t i = 0; i < m; ++i) {
                u[i] = f2[i] - f1[i];
                nrm += u[i] * u[i];
            }
            nrm = std::sqrt(nrm);
            if (nrm == 0.0) break;
            for (size_t i = 0; i < m; ++i) u[i] /= nrm;
        } else {
            const double sgn = (f2[cj] - f2[ci]) - (f1[cj] - f1[ci]) >= 0 ? 1.0 : -1.0;
            u[cj] = sgn;
            u[ci] = -sgn;
        }
        GradTape tape;
        TapeBinding bind = bind_network(tape, net, false);
        int x_id = tape.add_leaf(x2, true);
        int logits = forward_on_tape(tape, net, bind, x_id);
        int s = t_inner_const(tape, logits, u);
        tape.backward(s);
        Tensor jt = tape.grad_of(x_id);

        double dist2 = 0.0;
        for (size_t k = 0; k < d; ++k) {
            const double diff = x2[k] - x1[k];
            dist2 += diff * diff;
        }
        const double dist = std::sqrt(dist2);
        if (dist == 0.0) break;
        const double val = pair_value(f1.ptr(), f2.ptr());
        Tensor grad({1, base.dim(1), base.dim(2), base.dim(3)});
        for (size_t k = 0; k < d; ++k)
            grad[k] = jt[k] / dist - val * (x2[k] - x1[k]) / (dist2 * dist);
        const double gn = l2_norm(grad);
        if (gn == 0.0) break;
        for (size_t k = 0; k < d; ++k) x2[k] += 0.05 * dist * grad[k] / gn;

        Tensor f2n = forward(net, x2);
        double nd2 = 0.0;
        for (size_t k = 0; k < d; ++k) {
            const double diff = x2[k] - x1[k];
            nd2 += diff * diff;
        }
        if (nd2 > 0.0) best = std::max(best, pair_value(f1.ptr(), f2n.ptr()) / std::sqrt(nd2));
    }
    return best;
}

}  // namespace detail

/// Lower bound on the Lipschitz constant of the full logit map.
inline double empirical_lipschitz_lower_bound(const Network& net, const Tensor& base, size_t pairs,
                                              size_t refine_steps, uint64_t seed) {
    return detail::empirical_ratio_search(net, base, pairs, refine_steps, seed, true, 0, 0);
}

/// Lower bound on the Lipschitz constant of the logit difference f_j - f_i.
inline double empirical_margin_lower_bound(const Network& net, size_t j, size_t i, const Tensor& base,
                                           size_t pairs, size_t refine_steps, uint64_t seed) {
    return detail::empirical_ratio_search(net, base, pairs, refine_steps, seed, false, j, i);
}

// ---------------------------------------------------------------------------
// Central finite differences against analytic gradients.
// ---------------------------------------------------------------------------

struct FdOptions {
    double h = 1e-5;
    size_t coords_per_tensor = 200;
    uint64_t seed = 0x4644ull;
    double floor_frac = 1e-3;  // relative-error floor as a fraction of the largest analytic entry
};

struct FdResult {
    double max_rel = 0.0;
    size_t coords_checked = 0;
    std::string worst;
    size_t worst_index = 0;
    double worst_analytic = 0.0, worst_numeric = 0.0;
};

/// Perturbs each sampled coordinate of each listed tensor in place, calling
/// `eval` to recompute the scalar, and compares the central difference to the
/// supplied analytic gradient. The caller is responsible for freezing any
/// state that the analytic gradient treats as constant.
inline FdResult finite_diff_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                                  const std::map<std::string, Tensor>& analytic,
                                  const std::function<double()>& eval, const FdOptions& opt = {}) {
    double gmax = 0.0;
    for (const auto& [name, g] : analytic)
        for (double v : g.data) gmax = std::max(gmax, std::abs(v));
    const double theta = std::max(opt.floor_frac * gmax, 1e-12);

    FdResult res;
    Rng rng(opt.seed);
    for (const auto& [name, t] : params) {
        auto it = analytic.find(name);
        if (it == analytic.end()) throw std::invalid_argument("finite_diff_check: no analytic gradient for " + name);
        const Tensor& g = it->second;
        if (g.numel() != t->numel())
            throw std::invalid_argument("finite_diff_check: gradient size mismatch for " + name);

        std::vector<size_t> coords;
        if (t->numel() <= opt.coords_per_tensor) {
            coords.resize(t->numel());
            for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            for (size_t i = 0; i < opt.coords_per_tensor; ++i)
                coords.push_back(size_t(rng.next_u64() % t->numel()));
        }
        for (size_t c : coords) {
            const double saved = (*t)[c];
            (*t)[c] = saved + opt.h;
            const double fp = eval();
            (*t)[c] = saved - opt.h;
            const double fm = eval();
            (*t)[c] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = g[c];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), theta});
            ++res.coords_checked;
            if (rel > res.max_rel) {
                res.max_rel = rel;
                res.worst = name;
                res.worst_index = c;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace certlip

#pragma once

#include <array>
#include <map>

#include "network.hpp"

namespace certlip {

/// Train mode runs a fixed, small number of warm-started iterations and never
/// fails; certify mode iterates to a residual tolerance and refuses to emit a
/// bound when it cannot converge.
enum class BoundMode { Train, Certify };

struct PowerOpts {
    size_t train_iters = 5;
    double certify_tol = 1e-9;
    size_t certify_cap = 10000;
    double safety = 1.0 + 1e-6;  // multiplies certify-mode bounds; set 1.0 to disable
};

struct PowerState {
    Tensor v;  // unit-norm iterate, persisted across calls for warm starts
};

struct SpectralResult {
    double sigma = 0.0;
    double residual = 0.0;
    size_t iterations = 0;
};

namespace detail {

/// Power iteration on A^T A. `fwd` applies the operator, `adj` its adjoint.
/// The iterate in `state` is reused when its shape matches, otherwise it is
/// (re)initialized deterministically from `init_seed`.
template <class Fwd, class Adj>
SpectralResult power_iterate(Fwd&& fwd, Adj&& adj, const Shape& v_shape, PowerState& state,
                             BoundMode mode, const PowerOpts& opts, uint64_t init_seed) {
    if (state.v.shape != v_shape) {
        Rng rng(init_seed);
        state.v = gaussian_tensor(v_shape, rng);
        double n = l2_norm(state.v);
        if (n == 0.0) state.v.data[0] = 1.0;
        else for (double& x : state.v.data) x /= n;
    }

    // Certify-mode convergence is measured on the singular value estimate, not
    // the iterate: near-isometric layers leave the iterate rotating in an
    // almost-degenerate top subspace where the step norm stalls, while the
    // estimate itself is second order accurate in the iterate's angle error.
    SpectralResult res;
    res.residual = std::numeric_limits<double>::infinity();
    const size_t cap = mode == BoundMode::Train ? opts.train_iters : opts.certify_cap;
    double s_prev = -1.0;
    for (size_t it = 1; it <= cap; ++it) {
        Tensor u = fwd(state.v);
        double s = l2_norm(u);
        if (s == 0.0) {  // operator annihilates the iterate: zero operator for our PSD iteration
            res.sigma = 0.0;
            res.residual = 0.0;
            res.iterations = it;
            return res;
        }
        Tensor w = adj(u);
        double t = l2_norm(w);
        if (t == 0.0) {
            if (mode == BoundMode::Certify)
                throw std::runtime_error("power iteration: adjoint pass underflowed to zero");
            res.sigma = s;
            res.iterations = it;
            return res;
        }
        for (double& x : w.data) x /= t;
        state.v = std::move(w);
        res.iterations = it;
        if (s_prev >= 0.0) {
            res.residual = std::abs(s - s_prev) / s;
            if (mode == BoundMode::Certify && res.residual <= opts.certify_tol) {
                s_prev = s;
                break;
            }
        }
        s_prev = s;
    }
    if (mode == BoundMode::Certify && res.residual > opts.certify_tol)
        throw std::runtime_error("power iteration failed to converge: relative change " +
                                 std::to_string(res.residual) + " after " +
                                 std::to_string(res.iterations) + " iterations");
    res.sigma = l2_norm(fwd(state.v));
    if (mode == BoundMode::Certify) res.sigma *= opts.safety;
    return res;
}

}  // namespace detail

inline SpectralResult spectral_norm_dense(const Tensor& w, BoundMode mode, PowerState& state,
                                          const PowerOpts& opts, uint64_t init_seed = 0x64656E7365ull) {
    if (w.rank() != 2) throw std::invalid_argument("spectral_norm_dense: weight must be [m,d]");
    const size_t m = w.dim(0), d = w.dim(1);
    bool all_zero = true;
    for (double v : w.data)
        if (v != 0.0) { all_zero = false; break; }
    if (all_zero) return {0.0, 0.0, 0};

    auto fwd = [&](const Tensor& v) {
        Tensor out({m});
        for (size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) acc += w[j * d + k] * v[k];
            out[j] = acc;
        }
        return out;
    };
    auto adj = [&](const Tensor& u) {
        Tensor out({d});
        for (size_t j = 0; j < m; ++j)
            for (size_t k = 0; k < d; ++k) out[k] += w[j * d + k] * u[j];
        return out;
    };
    return detail::power_iterate(fwd, adj, {d}, state, mode, opts, init_seed);
}

/// Spectral norm of the linear map x -> conv2d(x, kernel) on inputs of
/// per-instance shape `in_shape` = {C,H,W}.
inline SpectralResult spectral_norm_conv(const Tensor& kernel, const Shape& in_shape, size_t stride,
                                         size_t pad, BoundMode mode, PowerState& state,
                                         const PowerOpts& opts, uint64_t init_seed = 0x636F6E76ull) {
    if (in_shape.size() != 3) throw std::invalid_argument("spectral_norm_conv: in_shape must be {C,H,W}");
    bool all_zero = true;
    for (double v : kernel.data)
        if (v != 0.0) { all_zero = false; break; }
    if (all_zero) return {0.0, 0.0, 0};

    const Shape x_shape = {1, in_shape[0], in_shape[1], in_shape[2]};
    auto fwd = [&](const Tensor& v) { return conv2d(v, kernel, stride, pad); };
    auto adj = [&](const Tensor& u) { return conv2d_adjoint(u, kernel, stride, pad, x_shape); };
    return detail::power_iterate(fwd, adj, x_shape, state, mode, opts, init_seed);
}

// ---------------------------------------------------------------------------
// Per-layer bounds and composition
// ---------------------------------------------------------------------------

struct LayerBound {
    std::string layer;
    std::string method;  // exact-spectral | power-iteration | activation-1 | loose-residual-sum
    double k = 1.0;
    double residual = 0.0;
    size_t iterations = 0;
};

/// Warm-start storage for every power iteration a network needs, keyed by
/// "<layer name>/<slot>". Iterates are (re)seeded deterministically from the
/// key, so freshly constructed state gives reproducible bounds.
struct NetPowerState {
    std::map<std::string, PowerState> slots;
    PowerState& slot(const std::string& key) { return slots[key]; }
    static uint64_t seed_for(const std::string& key) {
        return mix_seed(0x706F776572ull, fnv1a_hash(key.data(), key.size()));
    }
};

inline LayerBound layer_lipschitz(const Network& net, size_t layer_index, BoundMode mode,
                                  NetPowerState& state, const PowerOpts& opts) {
    const Layer& l = net.layers.at(layer_index);
    LayerBound out;
    out.layer = l.name;
    try {
    auto conv_bound = [&](const Tensor& kernel, const std::string& slot) {
        auto& ps = state.slot(l.name + "/" + slot);
        return spectral_norm_conv(kernel, l.in_shape, l.stride, l.padding, mode, ps, opts,
                                  NetPowerState::seed_for(l.name + "/" + slot));
    };
    switch (l.kind) {
        case LayerKind::MinMax:
        case LayerKind::Flatten:
            out.method = "activation-1";
            out.k = 1.0;
            break;
        case LayerKind::Stem:
        case LayerKind::ConvBlock:
        case LayerKind::NeckConv: {
            SpectralResult r = conv_bound(net.param(l.name + ".w"), "0");
            out.method = "power-iteration";
            out.k = r.sigma;
            out.residual = r.residual;
            out.iterations = r.iterations;
            break;
        }
        case LayerKind::LinearResidualBlock: {
            Tensor eq = equivalent_kernel(net.param(l.name + ".w"), net.param(l.name + ".beta"),
                                          l.depth_scale);
            SpectralResult r = conv_bound(eq, "0");
            out.method = "power-iteration";
            out.k = r.sigma;
            out.residual = r.residual;
            out.iterations = r.iterations;
            break;
        }
        case LayerKind::ConventionalResidualBlock: {
            // 1 + sigma(beta * W2) * sigma(W1): residual branch bound plus identity
            SpectralResult r1 = conv_bound(net.param(l.name + ".w1"), "0");
            Tensor w2 = net.param(l.name + ".w2");
            const Tensor& beta = net.param(l.name + ".beta");
            const size_t inner = w2.numel() / w2.dim(0);
            for (size_t o = 0; o < w2.dim(0); ++o)
                for (size_t i = 0; i < inner; ++i) w2[o * inner + i] *= beta[o];
            auto& ps2 = state.slot(l.name + "/1");
            SpectralResult r2 = spectral_norm_conv(w2, l.in_shape, l.stride, l.padding, mode, ps2,
                                                   opts, NetPowerState::seed_for(l.name + "/1"));
            out.method = "loose-residual-sum";
            out.k = 1.0 + r2.sigma * r1.sigma;
            out.residual = std::max(r1.residual, r2.residual);
            out.iterations = r1.iterations + r2.iterations;
            break;
        }
        case LayerKind::NeckDense:
        case LayerKind::DenseHead: {
            auto& ps = state.slot(l.name + "/0");
            SpectralResult r = spectral_norm_dense(net.param(l.name + ".w"), mode, ps, opts,
                                                   NetPowerState::seed_for(l.name + "/0"));
            out.method = "power-iteration";
            out.k = r.sigma;
            out.residual = r.residual;
            out.iterations = r.iterations;
            break;
        }
    }
    } catch (const std::runtime_error& e) {
        throw std::runtime_error("layer '" + l.name + "': " + e.what());
    }
    return out;
}

/// K[j,i] = ||row_j - row_i||_2 * k_sub: a bound on the Lipschitz constant of
/// the logit difference f_j - f_i. Symmetric with zero diagonal.
inline Tensor margin_lipschitz(const Tensor& head_w, double k_sub) {
    if (head_w.rank() != 2) throw std::invalid_argument("margin_lipschitz: head weight must be [m,d]");
    const size_t m = head_w.dim(0), d = head_w.dim(1);
    Tensor K({m, m});
    for (size_t j = 0; j < m; ++j)
        for (size_t i = 0; i < j; ++i) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) {
                const double diff = head_w[j * d + k] - head_w[i * d + k];
                acc += diff * diff;
            }
            const double v = std::sqrt(acc) * k_sub;
            K[j * m + i] = v;
            K[i * m + j] = v;
        }
    return K;
}

struct LipschitzReport {
    BoundMode mode = BoundMode::Train;
    std::vector<LayerBound> layers;  // all layers except the head
    LayerBound head;
    double k_sub = 1.0;   // product of bounds before the head
    Tensor margin;        // [m,m]
    uint64_t param_hash = 0;
    double safety = 1.0;
};

inline LipschitzReport lipschitz_report(const Network& net, BoundMode mode, NetPowerState& state,
                                        const PowerOpts& opts) {
    if (net.layers.empty() || net.layers.back().kind != LayerKind::DenseHead)
        throw std::runtime_error("lipschitz_report: last layer must be the dense head");
    LipschitzReport rep;
    rep.mode = mode;
    rep.safety = mode == BoundMode::Certify ? opts.safety : 1.0;
    double prod = 1.0;
    for (size_t i = 0; i + 1 < net.layers.size(); ++i) {
        LayerBound b = layer_lipschitz(net, i, mode, state, opts);
        prod *= b.k;
        rep.layers.push_back(std::move(b));
    }
    rep.head = layer_lipschitz(net, net.layers.size() - 1, mode, state, opts);
    rep.k_sub = prod;
    rep.margin = margin_lipschitz(net.head_weight(), prod);
    rep.param_hash = net.param_hash();
    return rep;
}

}  // namespace certlip

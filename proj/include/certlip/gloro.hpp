#pragma once

#include "lipschitz.hpp"
#include "network.hpp"

namespace certlip {

// ---------------------------------------------------------------------------
// Bottom logit: the worst attainable competing logit value within an eps-ball,
// given margin Lipschitz bounds K[j,i] for logit differences.
// ---------------------------------------------------------------------------

struct BottomLogit {
    double value = 0.0;
    int top = 0;       // argmax of the clean logits, ties to the lowest index
    int threat = -1;   // index attaining the bottom-logit max
};

inline BottomLogit bottom_logit(const double* f, size_t m, const Tensor& K, double eps) {
    if (m < 2) throw std::invalid_argument("bottom_logit: need at least 2 logits");
    if (K.rank() != 2 || K.dim(0) != m || K.dim(1) != m)
        throw std::invalid_argument("bottom_logit: margin matrix must be [m,m]");
    if (!(eps >= 0.0)) throw std::invalid_argument("bottom_logit: eps must be >= 0");
    BottomLogit out;
    size_t j = 0;
    for (size_t i = 1; i < m; ++i)
        if (f[i] > f[j]) j = i;
    out.top = int(j);
    double best = -std::numeric_limits<double>::infinity();
    int arg = -1;
    for (size_t i = 0; i < m; ++i) {
        if (i == j) continue;
        const double v = f[i] + eps * K[j * m + i];
        if (v > best) {
            best = v;
            arg = int(i);
        }
    }
    out.value = best;
    out.threat = arg;
    return out;
}

struct CertResult {
    int predicted = 0;
    bool certified = false;
    double f_top = 0.0;
    double f_bot = 0.0;
};

/// Deterministic certification of a batch. The report must come from certify
/// mode and must describe the network's current parameters; a ball of radius
/// eps around each input keeps the prediction whenever `certified` is set.
inline std::vector<CertResult> certified_predict(const Network& net, const Tensor& batch, double eps,
                                                 const LipschitzReport& rep) {
    if (rep.mode != BoundMode::Certify)
        throw std::runtime_error("certified_predict: report was not computed in certify mode");
    if (rep.param_hash != net.param_hash())
        throw std::runtime_error("certified_predict: stale Lipschitz report for these parameters");
    Tensor logits = forward(net, batch);
    const size_t N = logits.dim(0), m = logits.dim(1);
    std::vector<CertResult> out(N);
    for (size_t n = 0; n < N; ++n) {
        BottomLogit b = bottom_logit(logits.ptr() + n * m, m, rep.margin, eps);
        CertResult& r = out[n];
        r.predicted = b.top;
        r.f_top = logits[n * m + size_t(b.top)];
        r.f_bot = b.value;
        r.certified = r.f_top >= r.f_bot;  // ties certify
    }
    return out;
}

inline double vra(const std::vector<CertResult>& results, const std::vector<int>& labels) {
    if (results.size() != labels.size()) throw std::invalid_argument("vra: size mismatch");
    if (results.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < results.size(); ++i)
        if (results[i].certified && results[i].predicted == labels[i]) ++hits;
    return double(hits) / double(results.size());
}

inline double clean_accuracy(const std::vector<CertResult>& results, const std::vector<int>& labels) {
    if (results.size() != labels.size()) throw std::invalid_argument("clean_accuracy: size mismatch");
    if (results.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < results.size(); ++i)
        if (results[i].predicted == labels[i]) ++hits;
    return double(hits) / double(results.size());
}

// ---------------------------------------------------------------------------
// Per-class attackable radius: kappa_i = (f_y - f_i) / K[y,i], the largest
// perturbation scale at which class i provably cannot overtake y.
// ---------------------------------------------------------------------------

inline std::vector<double> kappa(const double* f, size_t m, int y, const Tensor& K) {
    if (y < 0 || size_t(y) >= m) throw std::invalid_argument("kappa: label out of range");
    std::vector<double> out(m, 0.0);
    for (size_t i = 0; i < m; ++i) {
        if (int(i) == y) continue;
        const double diff = f[size_t(y)] - f[i];
        const double kyi = K[size_t(y) * m + i];
        if (kyi == 0.0) {
            if (diff > 0) out[i] = std::numeric_limits<double>::infinity();
            else if (diff < 0) out[i] = -std::numeric_limits<double>::infinity();
            else out[i] = 0.0;
        } else {
            out[i] = diff / kyi;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses. All reduce by the batch mean. The margin matrix enters EMMA-style
// losses through per-row inflation terms and the bottom logit; gradients flow
// to both the logits and the margin matrix, but never through the inflation
// radii themselves (they are treated as constants of the current iterate).
// ---------------------------------------------------------------------------

enum class LossKind { Emma, GloroCe, GloroTrades, FixedMargin, PlainCe };

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::Emma: return "emma";
        case LossKind::GloroCe: return "gloro_ce";
        case LossKind::GloroTrades: return "gloro_trades";
        case LossKind::FixedMargin: return "fixed_margin";
        case LossKind::PlainCe: return "plain_ce";
    }
    return "?";
}

inline LossKind loss_kind_from_name(const std::string& s) {
    if (s == "emma") return LossKind::Emma;
    if (s == "gloro_ce") return LossKind::GloroCe;
    if (s == "gloro_trades") return LossKind::GloroTrades;
    if (s == "fixed_margin") return LossKind::FixedMargin;
    if (s == "plain_ce") return LossKind::PlainCe;
    throw std::invalid_argument("unknown loss '" + s + "'");
}

struct LossGrads {
    Tensor d_logits;  // [N,m]
    Tensor d_margin;  // [m,m]
};

struct LossOut {
    double value = 0.0;
    Tensor eps_tilde;  // [N,m], the inflation radii actually used
};

namespace detail {

inline double lse(const std::vector<double>& z, std::vector<double>* softmax_out) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    if (softmax_out) {
        softmax_out->resize(z.size());
        for (size_t i = 0; i < z.size(); ++i) (*softmax_out)[i] = std::exp(z[i] - mx) / s;
    }
    return mx + std::log(s);
}

}  // namespace detail

/// Evaluate any of the supported losses on a batch of logits.
/// `frozen_eps_tilde`, when given, replaces the inflation radii that would be
/// derived from the current logits (used to hold them constant across
/// finite-difference evaluations).
inline LossOut loss_eval(LossKind kind, const Tensor& logits, const std::vector<int>& labels,
                         const Tensor* K, double eps, double lambda,
                         const Tensor* frozen_eps_tilde = nullptr, LossGrads* grads = nullptr) {
    if (logits.rank() != 2) throw std::invalid_argument("loss_eval: logits must be [N,m]");
    const size_t N = logits.dim(0), m = logits.dim(1);
    if (labels.size() != N) throw std::invalid_argument("loss_eval: label count mismatch");
    if (kind != LossKind::PlainCe) {
        if (!K) throw std::invalid_argument("loss_eval: this loss needs a margin matrix");
        if (K->rank() != 2 || K->dim(0) != m || K->dim(1) != m)
            throw std::invalid_argument("loss_eval: margin matrix must be [m,m]");
        if (!(eps >= 0.0) || !std::isfinite(eps))
            throw std::invalid_argument("loss_eval: eps must be finite and >= 0");
    }
    if (frozen_eps_tilde &&
        (frozen_eps_tilde->rank() != 2 || frozen_eps_tilde->dim(0) != N || frozen_eps_tilde->dim(1) != m))
        throw std::invalid_argument("loss_eval: frozen inflation radii must be [N,m]");

    LossOut out;
    out.eps_tilde = Tensor({N, m});
    if (grads) {
        grads->d_logits = Tensor({N, m});
        grads->d_margin = Tensor({m, m});
    }
    const double inv_n = 1.0 / double(N);
    double total = 0.0;

    std::vector<double> z, p;
    for (size_t n = 0; n < N; ++n) {
        const double* f = logits.ptr() + n * m;
        const int y = labels[n];
        if (y < 0 || size_t(y) >= m) throw std::invalid_argument("loss_eval: label out of range");

        if (kind == LossKind::Emma || kind == LossKind::FixedMargin || kind == LossKind::PlainCe) {
            // cross entropy over inflated logits z_i = f_i + eps_tilde_i * K[y,i]
            z.assign(f, f + m);
            for (size_t i = 0; i < m; ++i) {
                if (int(i) == y || kind == LossKind::PlainCe) continue;
                double et;
                if (frozen_eps_tilde) {
                    et = (*frozen_eps_tilde)[n * m + i];
                } else if (kind == LossKind::FixedMargin) {
                    et = eps;
                } else {
                    const double diff = f[size_t(y)] - f[i];
                    const double kyi = (*K)[size_t(y) * m + i];
                    double kap;
                    if (kyi == 0.0) kap = diff > 0 ? std::numeric_limits<double>::infinity()
                                                   : (diff < 0 ? -std::numeric_limits<double>::infinity() : 0.0);
                    else kap = diff / kyi;
                    et = std::min(std::max(kap, 0.0), eps);
                }
                out.eps_tilde[n * m + i] = et;
                z[i] = f[i] + et * (*K)[size_t(y) * m + i];
            }
            const double l = detail::lse(z, grads ? &p : nullptr) - f[size_t(y)];
            total += l;
            if (grads) {
                for (size_t i = 0; i < m; ++i) {
                    grads->d_logits[n * m + i] += inv_n * (p[i] - (int(i) == y ? 1.0 : 0.0));
                    if (int(i) != y && kind != LossKind::PlainCe)
                        grads->d_margin[size_t(y) * m + i] += inv_n * p[i] * out.eps_tilde[n * m + i];
                }
            }
        } else {
            // gloro_ce / gloro_trades: augment with the bottom logit
            BottomLogit b = bottom_logit(f, m, *K, eps);
            const size_t j = size_t(b.top), istar = size_t(b.threat);
            z.assign(f, f + m);
            z.push_back(b.value);

            if (kind == LossKind::GloroCe) {
                const double l = detail::lse(z, grads ? &p : nullptr) - f[size_t(y)];
                total += l;
                if (grads) {
                    for (size_t i = 0; i < m; ++i)
                        grads->d_logits[n * m + i] += inv_n * (p[i] - (int(i) == y ? 1.0 : 0.0));
                    grads->d_logits[n * m + istar] += inv_n * p[m];
                    grads->d_margin[j * m + istar] += inv_n * p[m] * eps;
                }
            } else {  // GloroTrades: clean CE plus lambda * CE of augmented logits toward the prediction
                std::vector<double> zf(f, f + m), pf;
                const double l_clean = detail::lse(zf, grads ? &pf : nullptr) - f[size_t(y)];
                const double l_aug = detail::lse(z, grads ? &p : nullptr) - f[j];
                total += l_clean + lambda * l_aug;
                if (grads) {
                    for (size_t i = 0; i < m; ++i) {
                        double g = pf[i] - (int(i) == y ? 1.0 : 0.0);
                        g += lambda * (p[i] - (i == j ? 1.0 : 0.0));
                        grads->d_logits[n * m + i] += inv_n * g;
                    }
                    grads->d_logits[n * m + istar] += inv_n * lambda * p[m];
                    grads->d_margin[j * m + istar] += inv_n * lambda * p[m] * eps;
                }
            }
        }
    }
    out.value = total * inv_n;
    return out;
}

/// Tape-fused loss node. `margin` must be the tape node holding the [m,m]
/// margin matrix (pass -1 for plain cross entropy).
inline int t_loss(GradTape& tape, LossKind kind, int logits, int margin,
                  const std::vector<int>& labels, double eps, double lambda,
                  Tensor* eps_tilde_out = nullptr, const Tensor* frozen_eps_tilde = nullptr) {
    const Tensor* K = margin >= 0 ? &tape.val(margin) : nullptr;
    auto grads = std::make_shared<LossGrads>();
    Tensor frozen_copy;
    const Tensor* frozen = nullptr;
    if (frozen_eps_tilde) {
        frozen_copy = *frozen_eps_tilde;
        frozen = &frozen_copy;
    }
    LossOut out = loss_eval(kind, tape.val(logits), labels, K, eps, lambda, frozen, grads.get());
    if (eps_tilde_out) *eps_tilde_out = out.eps_tilde;
    std::vector<int> parents = margin >= 0 ? std::vector<int>{logits, margin} : std::vector<int>{logits};
    return tape.add_op(Tensor::scalar(out.value), parents,
                       [logits, margin, grads](GradTape& t, int self) {
                           const double g0 = t.nodes[size_t(self)].grad[0];
                           if (t.wants(logits)) t.accumulate(logits, scaled(grads->d_logits, g0));
                           if (margin >= 0 && t.wants(margin))
                               t.accumulate(margin, scaled(grads->d_margin, g0));
                       });
}

// ---------------------------------------------------------------------------
// Threatening classes and prediction churn
// ---------------------------------------------------------------------------

inline std::vector<int> threatening_classes(const Network& net, const Tensor& batch, double eps,
                                            const LipschitzReport& rep) {
    Tensor logits = forward(net, batch);
    const size_t N = logits.dim(0), m = logits.dim(1);
    std::vector<int> out(N);
    for (size_t n = 0; n < N; ++n) out[n] = bottom_logit(logits.ptr() + n * m, m, rep.margin, eps).threat;
    return out;
}

/// Fraction of entries that changed between two epochs' threatening classes.
inline double churn_metric(const std::vector<int>& prev, const std::vector<int>& cur) {
    if (prev.size() != cur.size()) throw std::invalid_argument("churn_metric: size mismatch");
    if (prev.empty()) return 0.0;
    size_t changed = 0;
    for (size_t i = 0; i < prev.size(); ++i)
        if (prev[i] != cur[i]) ++changed;
    return double(changed) / double(prev.size());
}

}  // namespace certlip

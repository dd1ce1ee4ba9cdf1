#pragma once

#include <chrono>

#include "datasets.hpp"
#include "gloro.hpp"
#include "lipschitz.hpp"
#include "network.hpp"
#include "oracle.hpp"

namespace certlip {

/// Perturbation budget ramp: 0.1*eps at t=0, rising linearly to 2*eps at
/// t=T/2, constant afterwards.
inline double epsilon_schedule(size_t t, size_t T, double eps) {
    if (T == 0) throw std::invalid_argument("epsilon_schedule: horizon must be positive");
    return (std::min(2.0 * double(t) / double(T), 1.0) * 1.9 + 0.1) * eps;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, Tensor> m, v;
    size_t t = 0;
};

inline void adam_step(Network& net, const std::map<std::string, Tensor>& grads, AdamState& st,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps_hat = 1e-8) {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(beta2, double(st.t));
    for (auto& [name, p] : net.params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw std::invalid_argument("adam_step: missing gradient for " + name);
        const Tensor& g = git->second;
        Tensor& m = st.m.try_emplace(name, Tensor(p.shape)).first->second;
        Tensor& v = st.v.try_emplace(name, Tensor(p.shape)).first->second;
        for (size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps_hat);
        }
    }
}

/// Lookahead wrapper: every k inner steps, the slow weights move a fraction
/// alpha toward the fast weights and the fast weights snap back to them.
struct LookaheadState {
    std::map<std::string, Tensor> slow;
    size_t inner = 0;
};

inline void lookahead_step(Network& net, LookaheadState& st, size_t k, double alpha) {
    if (st.slow.empty())
        for (const auto& [name, p] : net.params) st.slow.emplace(name, p);
    st.inner += 1;
    if (st.inner % k != 0) return;
    for (auto& [name, p] : net.params) {
        Tensor& s = st.slow.at(name);
        for (size_t i = 0; i < p.numel(); ++i) {
            s[i] += alpha * (p[i] - s[i]);
            p[i] = s[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Loss pipeline on the tape. The sub-Lipschitz factor is recorded through the
// frozen power iterates: sigma = ||conv(v; W)|| as a function of W, which
// makes the spectral subgradient u v^T flow into the kernels automatically.
// ---------------------------------------------------------------------------

struct LossPipeline {
    TapeBinding bind;
    int logits = -1;
    int margin = -1;  // -1 when the loss has no Lipschitz coupling
    int loss = -1;
    double k_sub = 1.0;
    Tensor eps_tilde;
};

inline LossPipeline build_loss_tape(GradTape& tape, const Network& net, const Tensor& inputs,
                                    const std::vector<int>& labels, LossKind kind, double eps,
                                    double lambda, const NetPowerState& power,
                                    const Tensor* frozen_eps_tilde = nullptr,
                                    bool params_need_grad = true) {
    LossPipeline pl;
    pl.bind = bind_network(tape, net, params_need_grad);
    int x = tape.add_const(inputs);
    pl.logits = forward_on_tape(tape, net, pl.bind, x);

    if (kind != LossKind::PlainCe) {
        if (net.layers.empty() || net.layers.back().kind != LayerKind::DenseHead)
            throw std::runtime_error("build_loss_tape: last layer must be the dense head");
        int k_node = -1;
        auto mul_in = [&](int sigma) { k_node = k_node < 0 ? sigma : t_mul_scalar_nodes(tape, k_node, sigma); };
        auto conv_sigma = [&](int kern, const Layer& l, const std::string& slot) {
            const Tensor& v = power.slots.at(l.name + "/" + slot).v;
            int vc = tape.add_const(v);
            return t_l2norm(tape, t_conv2d(tape, vc, kern, l.stride, l.padding));
        };
        for (size_t li = 0; li + 1 < net.layers.size(); ++li) {
            const Layer& l = net.layers[li];
            switch (l.kind) {
                case LayerKind::MinMax:
                case LayerKind::Flatten:
                    break;
                case LayerKind::Stem:
                case LayerKind::ConvBlock:
                case LayerKind::NeckConv:
                    mul_in(conv_sigma(pl.bind.id_of(net, l.name + ".w"), l, "0"));
                    break;
                case LayerKind::LinearResidualBlock: {
                    int eq = t_equivalent_kernel(tape, pl.bind.id_of(net, l.name + ".w"),
                                                 pl.bind.id_of(net, l.name + ".beta"), l.depth_scale);
                    mul_in(conv_sigma(eq, l, "0"));
                    break;
                }
                case LayerKind::ConventionalResidualBlock: {
                    int s1 = conv_sigma(pl.bind.id_of(net, l.name + ".w1"), l, "0");
                    int w2b = t_kernel_channel_scale(tape, pl.bind.id_of(net, l.name + ".w2"),
                                                     pl.bind.id_of(net, l.name + ".beta"), 1.0);
                    int s2 = conv_sigma(w2b, l, "1");
                    int prod = t_mul_scalar_nodes(tape, s1, s2);
                    mul_in(t_add_const(tape, prod, Tensor::scalar(1.0)));
                    break;
                }
                case LayerKind::NeckDense: {
                    const Tensor& v = power.slots.at(l.name + "/0").v;
                    int vc = tape.add_const(v.reshaped({1, v.numel()}));
                    mul_in(t_l2norm(tape, t_dense(tape, vc, pl.bind.id_of(net, l.name + ".w"))));
                    break;
                }
                case LayerKind::DenseHead:
                    throw std::runtime_error("build_loss_tape: dense head before the last layer");
            }
        }
        if (k_node < 0) k_node = tape.add_const(Tensor::scalar(1.0));
        pl.k_sub = tape.val(k_node)[0];
        pl.margin = t_margin_matrix(tape, pl.bind.id_of(net, net.layers.back().name + ".w"), k_node);
    }
    pl.loss = t_loss(tape, kind, pl.logits, pl.margin, labels, eps, lambda, &pl.eps_tilde,
                     frozen_eps_tilde);
    return pl;
}

/// Warm-start refresh of every power iterate the loss pipeline reads.
inline void refresh_power(const Network& net, NetPowerState& state, const PowerOpts& opts) {
    for (size_t li = 0; li + 1 < net.layers.size(); ++li) layer_lipschitz(net, li, BoundMode::Train, state, opts);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    ArchSpec arch;
    DatasetSpec data;
    LossKind loss = LossKind::Emma;
    double eps = 0.3;  // certification budget; the schedule ramps around it
    double lambda = 1.0;
    size_t epochs = 100;
    size_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 1;
    size_t power_iters = 5;
    bool lookahead = true;
    size_t lookahead_k = 5;
    double lookahead_alpha = 0.5;
    bool f32 = false;
    double safety = 1.0 + 1e-6;
};

struct TrainLogRow {
    size_t epoch = 0;
    double eps_train = 0.0;
    double loss = 0.0;
    double clean_acc = 0.0;
    double vra = 0.0;
    double churn = 0.0;
    double k_sub = 0.0;
    double wall_s = 0.0;  // written as 0 in logs; real timings go to stdout only
};

enum class TrainStatus { Ok, Diverged, PowerStall };

struct TrainResult {
    Network net;
    std::vector<TrainLogRow> log;
    TrainStatus status = TrainStatus::Ok;
    size_t completed_epochs = 0;
    NetPowerState power;
    AdamState adam;
    LookaheadState look;
    LipschitzReport report;  // certify mode, for the returned parameters
    std::vector<double> epoch_wall;
};

inline void write_trainlog(const std::vector<TrainLogRow>& rows, std::ostream& os) {
    os << "epoch,eps_train,loss,clean_acc,vra,churn,k_sub,wall_s\n";
    char buf[512];
    for (const auto& r : rows) {
        // the wall column is pinned to zero so reruns produce byte-identical logs
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,0\n", r.epoch,
                      r.eps_train, r.loss, r.clean_acc, r.vra, r.churn, r.k_sub);
        os << buf;
    }
}

inline TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr) {
    Dataset full = cfg.data.materialize();
    auto [train_ds, test_ds] = split_80_20(full);
    Shape sshape = full.sample_shape();
    ArchSpec arch = cfg.arch;
    if (arch.classes == 0) arch.classes = full.num_classes;
    if (arch.in_channels == 0) arch.in_channels = sshape[0];
    if (arch.in_height == 0) arch.in_height = sshape[1];
    if (arch.in_width == 0) arch.in_width = sshape[2];
    if (arch.classes != full.num_classes || arch.in_channels != sshape[0] ||
        arch.in_height != sshape[1] || arch.in_width != sshape[2])
        throw std::invalid_argument("train: architecture input/classes do not match the dataset");

    TrainResult res;
    res.net = build_network(arch, cfg.seed);
    PowerOpts train_opts;
    train_opts.train_iters = cfg.power_iters;
    PowerOpts certify_opts;
    certify_opts.safety = cfg.safety;

    if (cfg.lookahead)
        for (const auto& [name, p] : res.net.params) res.look.slow.emplace(name, p);

    Network last_good = res.net;
    std::vector<int> prev_threat;
    bool have_report = false;

    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double eps_train = epsilon_schedule(epoch, cfg.epochs, cfg.eps);
        double loss_sum = 0.0;
        size_t batch_count = 0;
        bool diverged = false;

        for (const Batch& b : batches(train_ds, cfg.batch_size, true, cfg.seed, epoch)) {
            // the finite guards in the tensor ops fire mid-step when an update
            // has blown up; that is divergence, not a structural error
            try {
                refresh_power(res.net, res.power, train_opts);
                GradTape tape;
                tape.round_f32 = cfg.f32;
                LossPipeline pl = build_loss_tape(tape, res.net, b.inputs, b.labels, cfg.loss,
                                                  eps_train, cfg.lambda, res.power);
                const double lval = tape.val(pl.loss)[0];
                if (!std::isfinite(lval)) {
                    diverged = true;
                    break;
                }
                loss_sum += lval;
                ++batch_count;
                tape.backward(pl.loss);
                std::map<std::string, Tensor> grads;
                for (size_t i = 0; i < res.net.params.size(); ++i)
                    grads.emplace(res.net.params[i].first, tape.grad_of(pl.bind.param_ids[i]));
                adam_step(res.net, grads, res.adam, cfg.lr);
                if (cfg.lookahead)
                    lookahead_step(res.net, res.look, cfg.lookahead_k, cfg.lookahead_alpha);
            } catch (const std::runtime_error& e) {
                if (std::string(e.what()).find("non-finite") == std::string::npos) throw;
                diverged = true;
                break;
            }
            bool finite = true;
            for (const auto& [name, p] : res.net.params)
                if (!p.all_finite()) finite = false;
            if (!finite) {
                diverged = true;
                break;
            }
        }
        if (diverged) {
            res.status = TrainStatus::Diverged;
            res.net = last_good;
            break;
        }

        LipschitzReport rep;
        try {
            rep = lipschitz_report(res.net, BoundMode::Certify, res.power, certify_opts);
        } catch (const std::runtime_error& e) {
            // A certified bound that refuses to converge mid-run is a property of
            // the current parameters, not of the work done so far: keep the last
            // epoch whose report converged instead of discarding the whole run.
            if (std::string(e.what()).find("failed to converge") == std::string::npos) throw;
            if (!have_report) throw;
            res.status = TrainStatus::PowerStall;
            res.net = last_good;
            if (progress) (*progress) << "power stall at epoch " << epoch << ": " << e.what()
                                      << "\n" << std::flush;
            break;
        }
        auto certs = certified_predict(res.net, test_ds.inputs, cfg.eps, rep);
        std::vector<int> threat = threatening_classes(res.net, train_ds.inputs, cfg.eps, rep);

        TrainLogRow row;
        row.epoch = epoch;
        row.eps_train = eps_train;
        row.loss = batch_count ? loss_sum / double(batch_count) : 0.0;
        row.clean_acc = clean_accuracy(certs, test_ds.labels);
        row.vra = vra(certs, test_ds.labels);
        row.churn = prev_threat.empty() ? 0.0 : churn_metric(prev_threat, threat);
        row.k_sub = rep.k_sub;
        res.log.push_back(row);
        prev_threat = std::move(threat);
        last_good = res.net;
        res.report = rep;
        have_report = true;
        res.completed_epochs = epoch + 1;
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.epoch_wall.push_back(wall);
        if (progress) {
            char buf[512];
            std::snprintf(buf, sizeof buf,
                          "epoch=%zu eps_train=%.6g loss=%.6g clean_acc=%.4f vra=%.4f churn=%.4f "
                          "k_sub=%.6g wall_s=%.3f\n",
                          epoch, eps_train, row.loss, row.clean_acc, row.vra, row.churn, row.k_sub, wall);
            (*progress) << buf << std::flush;
        }
    }

    if (!have_report)
        res.report = lipschitz_report(res.net, BoundMode::Certify, res.power, certify_opts);
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing for resumable training state
// ---------------------------------------------------------------------------

inline TrainingExtras training_extras(const TrainResult& res) {
    TrainingExtras ex;
    for (const auto& [name, t] : res.adam.m) ex.emplace("adam/m/" + name, t);
    for (const auto& [name, t] : res.adam.v) ex.emplace("adam/v/" + name, t);
    ex.emplace("adam/t", Tensor::scalar(double(res.adam.t)));
    for (const auto& [name, t] : res.look.slow) ex.emplace("look/slow/" + name, t);
    ex.emplace("look/inner", Tensor::scalar(double(res.look.inner)));
    for (const auto& [key, ps] : res.power.slots)
        if (ps.v.numel() > 0) ex.emplace("power/" + key, ps.v);
    ex.emplace("state/epochs", Tensor::scalar(double(res.completed_epochs)));
    return ex;
}

inline NetPowerState power_from_extras(const TrainingExtras& ex) {
    NetPowerState st;
    const std::string prefix = "power/";
    for (const auto& [name, t] : ex)
        if (name.rfind(prefix, 0) == 0) st.slots[name.substr(prefix.size())].v = t;
    return st;
}

}  // namespace certlip

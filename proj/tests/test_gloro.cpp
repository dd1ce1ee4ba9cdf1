#include <catch2/catch_amalgamated.hpp>
#include <certlip/gloro.hpp>
#include <certlip/oracle.hpp>

using namespace certlip;

namespace {

Tensor random_margin(size_t m, Rng& rng) {
    Tensor K({m, m});
    for (size_t j = 0; j < m; ++j)
        for (size_t i = 0; i < j; ++i) {
            const double v = 0.1 + std::abs(rng.gaussian());
            K[j * m + i] = v;
            K[i * m + j] = v;
        }
    return K;
}

double eval_loss(LossKind kind, const Tensor& logits, const std::vector<int>& labels, const Tensor* K,
                 double eps, double lambda = 1.0) {
    return loss_eval(kind, logits, labels, K, eps, lambda).value;
}

}  // namespace

TEST_CASE("bottom logit on a worked example") {
    Tensor K({3, 3});
    K.at({0, 1}) = K.at({1, 0}) = 2.0;
    K.at({0, 2}) = K.at({2, 0}) = 4.0;
    K.at({1, 2}) = K.at({2, 1}) = 1.0;
    const double f[3] = {5, 3, 1};
    BottomLogit b = bottom_logit(f, 3, K, 0.5);
    REQUIRE(b.top == 0);
    REQUIRE(b.value == Catch::Approx(4.0));  // max(3 + 0.5*2, 1 + 0.5*4)
    REQUIRE(b.threat == 1);

    SECTION("argmax ties resolve to the lowest index") {
        const double g[3] = {5, 5, 1};
        REQUIRE(bottom_logit(g, 3, K, 0.1).top == 0);
    }
    SECTION("fewer than two logits is an error") {
        const double h[1] = {1};
        Tensor K1({1, 1});
        REQUIRE_THROWS_AS(bottom_logit(h, 1, K1, 0.1), std::invalid_argument);
    }
    SECTION("negative eps is an error") {
        REQUIRE_THROWS_AS(bottom_logit(f, 3, K, -0.1), std::invalid_argument);
    }
}

TEST_CASE("certified predictions on a linear model") {
    // f(x) = (x0, -x0): margin Lipschitz constant of f0 - f1 is 2
    Network net = make_head_only_network(Tensor({2, 2}, {1, 0, -1, 0}));
    NetPowerState st;
    PowerOpts opts;
    opts.safety = 1.0;
    LipschitzReport rep = lipschitz_report(net, BoundMode::Certify, st, opts);
    REQUIRE(rep.k_sub == 1.0);
    REQUIRE(rep.margin.at({0, 1}) == Catch::Approx(2.0));

    Tensor x({1, 1, 1, 2}, {0.6, 0.0});
    auto at = [&](double eps) { return certified_predict(net, x.reshaped({1, 2}), eps, rep)[0]; };
    REQUIRE(at(0.59).certified);
    REQUIRE(at(0.60).certified);  // exact tie still certifies
    REQUIRE_FALSE(at(0.61).certified);
    REQUIRE(at(0.59).predicted == 0);

    SECTION("stale reports are rejected") {
        net.param("head.w")[0] = 2.0;
        REQUIRE_THROWS_WITH(certified_predict(net, x.reshaped({1, 2}), 0.1, rep),
                            Catch::Matchers::ContainsSubstring("stale"));
    }
    SECTION("train-mode reports are rejected") {
        NetPowerState st2;
        LipschitzReport train_rep = lipschitz_report(net, BoundMode::Train, st2, opts);
        REQUIRE_THROWS_WITH(certified_predict(net, x.reshaped({1, 2}), 0.1, train_rep),
                            Catch::Matchers::ContainsSubstring("certify"));
    }
}

TEST_CASE("identical head rows certify through exact ties") {
    Network net = make_head_only_network(Tensor({2, 2}, {1, 1, 1, 1}));
    NetPowerState st;
    PowerOpts opts;
    LipschitzReport rep = lipschitz_report(net, BoundMode::Certify, st, opts);
    REQUIRE(rep.margin.at({0, 1}) == 0.0);
    Tensor x({1, 2}, {3.0, -1.0});
    auto res = certified_predict(net, x, 10.0, rep);
    REQUIRE(res[0].certified);
    REQUIRE(res[0].f_top == res[0].f_bot);
}

TEST_CASE("certified sets are nested across eps") {
    Rng rng(808);
    Network net = make_head_only_network(gaussian_tensor({4, 6}, rng));
    NetPowerState st;
    PowerOpts opts;
    LipschitzReport rep = lipschitz_report(net, BoundMode::Certify, st, opts);
    Tensor X = gaussian_tensor({64, 6}, rng);
    const double epss[] = {0.0, 0.05, 0.1, 0.2, 0.4};
    std::vector<std::vector<CertResult>> res;
    for (double e : epss) res.push_back(certified_predict(net, X, e, rep));
    for (size_t k = 1; k < res.size(); ++k)
        for (size_t n = 0; n < 64; ++n) {
            if (res[k][n].certified) REQUIRE(res[k - 1][n].certified);
        }
    for (size_t n = 0; n < 64; ++n) REQUIRE(res[0][n].certified);  // eps = 0 certifies everything
}

TEST_CASE("vra counts correct and certified points") {
    std::vector<CertResult> rs(4);
    rs[0] = {1, true, 0, 0};
    rs[1] = {1, false, 0, 0};
    rs[2] = {0, true, 0, 0};
    rs[3] = {1, true, 0, 0};
    std::vector<int> labels = {1, 1, 1, 0};
    REQUIRE(vra(rs, labels) == Catch::Approx(0.25));
    REQUIRE(clean_accuracy(rs, labels) == Catch::Approx(0.5));
    REQUIRE_THROWS_AS(vra(rs, std::vector<int>{1}), std::invalid_argument);
}

TEST_CASE("kappa handles zero margin constants") {
    Tensor K({3, 3});
    K.at({0, 1}) = K.at({1, 0}) = 2.0;  // K[0,2] stays zero
    const double f[3] = {4, 1, 1};
    auto k = kappa(f, 3, 0, K);
    REQUIRE(k[0] == 0.0);
    REQUIRE(k[1] == Catch::Approx(1.5));
    REQUIRE(k[2] == std::numeric_limits<double>::infinity());

    const double g[3] = {1, 1, 4};
    auto k2 = kappa(g, 3, 0, K);
    REQUIRE(k2[2] == -std::numeric_limits<double>::infinity());
}

TEST_CASE("emma loss on a worked two-class example") {
    Tensor logits({1, 2}, {2.0, -1.0});
    Tensor K({2, 2});
    K.at({0, 1}) = K.at({1, 0}) = 2.0;
    std::vector<int> y = {0};
    LossOut out = loss_eval(LossKind::Emma, logits, y, &K, 0.5, 1.0);
    // kappa_1 = 3/2 clips to 0.5, inflated logit -1 + 0.5*2 = 0
    REQUIRE(out.eps_tilde.at({0, 1}) == Catch::Approx(0.5));
    REQUIRE(out.value == Catch::Approx(std::log(1.0 + std::exp(-2.0))));
}

TEST_CASE("gloro_ce loss on a worked example") {
    Tensor logits({1, 3}, {5.0, 3.0, 1.0});
    Tensor K({3, 3});
    K.at({0, 1}) = K.at({1, 0}) = 2.0;
    K.at({0, 2}) = K.at({2, 0}) = 4.0;
    K.at({1, 2}) = K.at({2, 1}) = 1.0;
    std::vector<int> y = {0};
    const double f_bot = 4.0;
    const double lse = std::log(std::exp(5.0) + std::exp(3.0) + std::exp(1.0) + std::exp(f_bot));
    LossOut out = loss_eval(LossKind::GloroCe, logits, y, &K, 0.5, 1.0);
    REQUIRE(out.value == Catch::Approx(lse - 5.0).epsilon(1e-12));
}

TEST_CASE("emma collapses to cross entropy when no class is attackable") {
    // label logit lowest: every kappa is <= 0, so every inflation radius is 0
    Tensor logits({2, 3}, {0.0, 1.0, 2.0, -3.0, 0.5, 4.0});
    std::vector<int> y = {0, 0};
    Rng rng(11);
    Tensor K = random_margin(3, rng);
    const double emma = eval_loss(LossKind::Emma, logits, y, &K, 0.7);
    const double ce = eval_loss(LossKind::PlainCe, logits, y, nullptr, 0.0);
    REQUIRE(std::abs(emma - ce) <= 1e-12);
}

TEST_CASE("loss family ordering holds on random instances") {
    Rng rng(909);
    for (int rep = 0; rep < 300; ++rep) {
        const size_t N = 1 + rep % 3, m = 2 + rep % 4;
        Tensor logits = gaussian_tensor({N, m}, rng, 2.0);
        Tensor K = random_margin(m, rng);
        std::vector<int> y(N);
        for (auto& v : y) v = int(rng.next_u64() % m);
        const double eps = 0.05 + 0.5 * rng.uniform();

        const double ce = eval_loss(LossKind::PlainCe, logits, y, nullptr, 0.0);
        const double emma = eval_loss(LossKind::Emma, logits, y, &K, eps);
        const double fixed = eval_loss(LossKind::FixedMargin, logits, y, &K, eps);
        REQUIRE(emma <= fixed + 1e-12);
        REQUIRE(emma >= ce - 1e-12);
        REQUIRE(fixed >= ce - 1e-12);
        const double gce = eval_loss(LossKind::GloroCe, logits, y, &K, eps);
        REQUIRE(gce >= ce - 1e-12);
    }
}

TEST_CASE("losses are monotone in eps") {
    Rng rng(919);
    for (int rep = 0; rep < 100; ++rep) {
        const size_t m = 2 + rep % 4;
        Tensor logits = gaussian_tensor({2, m}, rng, 2.0);
        Tensor K = random_margin(m, rng);
        std::vector<int> y = {int(rng.next_u64() % m), int(rng.next_u64() % m)};
        const double e1 = 0.3 * rng.uniform(), e2 = e1 + 0.2 + rng.uniform();
        for (LossKind kind : {LossKind::Emma, LossKind::FixedMargin, LossKind::GloroCe,
                              LossKind::GloroTrades}) {
            const double l1 = eval_loss(kind, logits, y, &K, e1);
            const double l2 = eval_loss(kind, logits, y, &K, e2);
            REQUIRE(l1 <= l2 + 1e-12);
        }
    }
}

TEST_CASE("losses are invariant to uniform logit shifts") {
    Rng rng(929);
    for (int rep = 0; rep < 50; ++rep) {
        const size_t m = 3;
        Tensor logits = gaussian_tensor({2, m}, rng, 2.0);
        Tensor shifted = logits;
        const double c = 5.0 * rng.gaussian();
        for (double& v : shifted.data) v += 0;
        for (size_t n = 0; n < 2; ++n)
            for (size_t i = 0; i < m; ++i) shifted[n * m + i] += c;
        Tensor K = random_margin(m, rng);
        std::vector<int> y = {1, 2};
        for (LossKind kind : {LossKind::Emma, LossKind::FixedMargin, LossKind::GloroCe,
                              LossKind::GloroTrades, LossKind::PlainCe}) {
            const double a = eval_loss(kind, logits, y, kind == LossKind::PlainCe ? nullptr : &K, 0.4);
            const double b = eval_loss(kind, shifted, y, kind == LossKind::PlainCe ? nullptr : &K, 0.4);
            REQUIRE(a == Catch::Approx(b).margin(1e-12).epsilon(1e-12));
        }
    }
}

TEST_CASE("trades with zero lambda reduces to plain cross entropy") {
    Rng rng(939);
    Tensor logits = gaussian_tensor({4, 5}, rng, 2.0);
    Tensor K = random_margin(5, rng);
    std::vector<int> y = {0, 1, 2, 3};
    const double a = eval_loss(LossKind::GloroTrades, logits, y, &K, 0.3, 0.0);
    const double b = eval_loss(LossKind::PlainCe, logits, y, nullptr, 0.0);
    REQUIRE(a == Catch::Approx(b).epsilon(1e-14));
}

TEST_CASE("loss gradients match finite differences on logit and margin leaves") {
    Rng rng(949);
    const size_t N = 4, m = 4;
    Tensor logits = gaussian_tensor({N, m}, rng, 1.5);
    Tensor K = random_margin(m, rng);
    std::vector<int> y = {0, 3, 1, 2};
    const double eps = 0.35, lambda = 0.8;

    for (LossKind kind : {LossKind::Emma, LossKind::GloroCe, LossKind::GloroTrades,
                          LossKind::FixedMargin, LossKind::PlainCe}) {
        const bool with_margin = kind != LossKind::PlainCe;
        // freeze the inflation radii at their current values
        LossOut probe = loss_eval(kind, logits, y, with_margin ? &K : nullptr, eps, lambda);
        const Tensor frozen = probe.eps_tilde;
        const bool freeze = kind == LossKind::Emma || kind == LossKind::FixedMargin;

        GradTape tape;
        int lg = tape.add_leaf(logits, true);
        int mg = with_margin ? tape.add_leaf(K, true) : -1;
        int ls = t_loss(tape, kind, lg, mg, y, eps, lambda, nullptr, freeze ? &frozen : nullptr);
        tape.backward(ls);

        std::map<std::string, Tensor> analytic;
        analytic.emplace("logits", tape.grad_of(lg));
        std::vector<std::pair<std::string, Tensor*>> params{{"logits", &logits}};
        if (with_margin) {
            analytic.emplace("margin", tape.grad_of(mg));
            params.emplace_back("margin", &K);
        }
        auto eval = [&]() {
            return loss_eval(kind, logits, y, with_margin ? &K : nullptr, eps, lambda,
                             freeze ? &frozen : nullptr)
                .value;
        };
        FdOptions opt;
        opt.seed = 555;
        FdResult r = finite_diff_check(params, analytic, eval, opt);
        INFO(loss_kind_name(kind) << ": worst " << r.worst << "[" << r.worst_index << "] analytic "
                                  << r.worst_analytic << " numeric " << r.worst_numeric);
        REQUIRE(r.max_rel < 1e-5);
    }
}

TEST_CASE("threatening classes and churn") {
    Network net = make_head_only_network(Tensor({3, 2}, {1, 0, -1, 0, 0, 1}));
    NetPowerState st;
    PowerOpts opts;
    opts.safety = 1.0;
    LipschitzReport rep = lipschitz_report(net, BoundMode::Certify, st, opts);
    Tensor X({2, 2}, {2.0, 0.0, 0.0, 3.0});
    auto threats = threatening_classes(net, X, 0.1, rep);
    REQUIRE(threats.size() == 2);
    // row 0 predicts class 0; row 1 predicts class 2
    Tensor f = forward(net, X);
    BottomLogit b0 = bottom_logit(f.ptr(), 3, rep.margin, 0.1);
    REQUIRE(threats[0] == b0.threat);

    REQUIRE(churn_metric({1, 2, 0, 1}, {1, 0, 0, 2}) == Catch::Approx(0.5));
    REQUIRE(churn_metric({}, {}) == 0.0);
    REQUIRE_THROWS_AS(churn_metric({1}, {1, 2}), std::invalid_argument);
}

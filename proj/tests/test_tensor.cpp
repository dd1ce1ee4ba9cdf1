#include <catch2/catch_amalgamated.hpp>
#include <certlip/tensor.hpp>

using namespace certlip;

namespace {

// Reference convolution, written independently of the library routine:
// materializes the zero-padded input, then walks output positions directly.
Tensor naive_conv2d(const Tensor& input, const Tensor& kernel, size_t stride, size_t pad) {
    const size_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor padded({N, Ci, Hp, Wp});
    for (size_t n = 0; n < N; ++n)
        for (size_t c = 0; c < Ci; ++c)
            for (size_t h = 0; h < H; ++h)
                for (size_t w = 0; w < W; ++w)
                    padded.at({n, c, h + pad, w + pad}) = input.at({n, c, h, w});
    const size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1;
    Tensor out({N, Co, Ho, Wo});
    for (size_t n = 0; n < N; ++n)
        for (size_t co = 0; co < Co; ++co)
            for (size_t oh = 0; oh < Ho; ++oh)
                for (size_t ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (size_t ci = 0; ci < Ci; ++ci)
                        for (size_t r = 0; r < kh; ++r)
                            for (size_t c = 0; c < kw; ++c)
                                acc += padded.at({n, ci, oh * stride + r, ow * stride + c}) *
                                       kernel.at({co, ci, r, c});
                    out.at({n, co, oh, ow}) = acc;
                }
    return out;
}

Tensor random_tensor(Shape s, uint64_t seed) {
    Rng rng(seed);
    return gaussian_tensor(std::move(s), rng);
}

}  // namespace

TEST_CASE("conv2d matches a worked example") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor y = conv2d(x, k, 1, 0);
    REQUIRE(y.shape == Shape{1, 1, 1, 1});
    REQUIRE(y[0] == 5.0);
}

TEST_CASE("conv2d output extents follow the floor formula") {
    Tensor x({1, 1, 7, 5});
    Tensor k({2, 1, 3, 3});
    SECTION("stride 1, pad 0") {
        Tensor y = conv2d(x, k, 1, 0);
        REQUIRE(y.shape == Shape{1, 2, 5, 3});
    }
    SECTION("stride 2, pad 1") {
        Tensor y = conv2d(x, k, 2, 1);
        REQUIRE(y.shape == Shape{1, 2, 4, 3});  // floor((7+2-3)/2)+1, floor((5+2-3)/2)+1
    }
    SECTION("kernel larger than padded input") {
        Tensor big({1, 1, 9, 9});
        REQUIRE_THROWS_AS(conv2d(x, big, 1, 0), std::invalid_argument);
    }
    SECTION("channel mismatch") {
        Tensor bad({2, 3, 3, 3});
        REQUIRE_THROWS_AS(conv2d(x, bad, 1, 0), std::invalid_argument);
    }
}

TEST_CASE("conv2d agrees with the naive reference") {
    struct Case {
        size_t N, Ci, H, W, Co, kh, kw, stride, pad;
    };
    const Case cases[] = {
        {1, 1, 4, 4, 1, 3, 3, 1, 1}, {2, 3, 5, 7, 4, 3, 3, 1, 1}, {1, 2, 8, 8, 2, 5, 5, 2, 2},
        {3, 1, 1, 6, 2, 3, 3, 1, 1}, {1, 4, 6, 6, 4, 1, 1, 1, 0}, {2, 2, 9, 5, 3, 3, 1, 2, 1},
        {1, 3, 5, 5, 2, 5, 3, 1, 2},
    };
    uint64_t seed = 11;
    for (const Case& c : cases) {
        Tensor x = random_tensor({c.N, c.Ci, c.H, c.W}, seed++);
        Tensor k = random_tensor({c.Co, c.Ci, c.kh, c.kw}, seed++);
        Tensor got = conv2d(x, k, c.stride, c.pad);
        Tensor want = naive_conv2d(x, k, c.stride, c.pad);
        REQUIRE(got.shape == want.shape);
        for (size_t i = 0; i < got.numel(); ++i)
            REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
    }
}

TEST_CASE("conv2d_adjoint satisfies the inner-product identity") {
    struct Case {
        size_t N, Ci, H, W, Co, k, stride, pad;
    };
    const Case cases[] = {
        {1, 1, 4, 4, 2, 3, 1, 1}, {2, 3, 6, 5, 3, 3, 2, 1}, {1, 2, 8, 8, 2, 5, 2, 2},
        {1, 1, 1, 8, 4, 3, 1, 1}, {2, 4, 5, 5, 4, 1, 1, 0}, {1, 2, 7, 7, 3, 3, 3, 0},
        {3, 2, 4, 6, 2, 3, 1, 0}, {1, 3, 9, 4, 5, 3, 2, 2}, {2, 1, 5, 9, 1, 5, 1, 2},
        {1, 6, 3, 3, 6, 3, 1, 1},
    };
    uint64_t seed = 101;
    for (const Case& c : cases) {
        Tensor x = random_tensor({c.N, c.Ci, c.H, c.W}, seed++);
        Tensor k = random_tensor({c.Co, c.Ci, c.k, c.k}, seed++);
        Tensor ax = conv2d(x, k, c.stride, c.pad);
        Tensor y = random_tensor(ax.shape, seed++);
        Tensor aty = conv2d_adjoint(y, k, c.stride, c.pad, x.shape);
        const double lhs = dot(ax, y);
        const double rhs = dot(x, aty);
        REQUIRE(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("conv2d_kernel_grad satisfies the bilinear pairing identity") {
    // <conv(x;K), Y> is linear in K, so it must equal <K, kernel_grad(x, Y)>
    uint64_t seed = 211;
    for (int rep = 0; rep < 6; ++rep) {
        Tensor x = random_tensor({2, 3, 6, 6}, seed++);
        Tensor k = random_tensor({4, 3, 3, 3}, seed++);
        Tensor ax = conv2d(x, k, 1, 1);
        Tensor y = random_tensor(ax.shape, seed++);
        Tensor gk = conv2d_kernel_grad(x, y, 1, 1, k.shape);
        const double lhs = dot(ax, y);
        const double rhs = dot(k, gk);
        REQUIRE(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("dense_apply computes x W^T + b") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w({2, 3}, {1, 0, 0, 0, 1, 1});
    Tensor b({2}, {10, -1});
    Tensor y = dense_apply(x, w, &b);
    REQUIRE(y.shape == Shape{2, 2});
    REQUIRE(y[0] == 11.0);
    REQUIRE(y[1] == 4.0);
    REQUIRE(y[2] == 14.0);
    REQUIRE(y[3] == 10.0);
    REQUIRE_THROWS_AS(dense_apply(x, Tensor({2, 4})), std::invalid_argument);
}

TEST_CASE("minmax sorts channel pairs and routes gradients to source slots") {
    SECTION("distinct values") {
        Tensor x({1, 4, 1, 1}, {3, 1, -2, 5});
        std::vector<uint8_t> route;
        Tensor y = minmax_apply(x, &route);
        REQUIRE(y.data == std::vector<double>{1, 3, -2, 5});
        Tensor g({1, 4, 1, 1}, {1, 2, 4, 8});
        Tensor gx = minmax_backward(g, route);
        // pair 0 swapped: min came from slot 1, max from slot 0
        REQUIRE(gx.data == std::vector<double>{2, 1, 4, 8});
    }
    SECTION("ties route both outputs to the first element") {
        Tensor x({1, 2, 1, 1}, {-2, -2});
        std::vector<uint8_t> route;
        Tensor y = minmax_apply(x, &route);
        REQUIRE(y.data == std::vector<double>{-2, -2});
        Tensor g({1, 2, 1, 1}, {1, 2});
        Tensor gx = minmax_backward(g, route);
        REQUIRE(gx.data == std::vector<double>{3, 0});
    }
    SECTION("spatial axes are preserved") {
        Tensor x({1, 2, 2, 1}, {1, 4, 2, 3});
        Tensor y = minmax_apply(x);
        REQUIRE(y.data == std::vector<double>{1, 3, 2, 4});
    }
    SECTION("odd channel count is rejected") {
        Tensor x({1, 3, 1, 1});
        REQUIRE_THROWS_AS(minmax_apply(x), std::invalid_argument);
    }
}

TEST_CASE("minmax is an isometry on each pair") {
    Tensor x = random_tensor({2, 6, 3, 3}, 77);
    Tensor y = minmax_apply(x);
    REQUIRE(l2_norm(x) == Catch::Approx(l2_norm(y)).epsilon(1e-14));
}

TEST_CASE("tensor basics") {
    SECTION("shape/data mismatch rejected") {
        REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0}), std::invalid_argument);
    }
    SECTION("reshape preserves element count") {
        Tensor t({2, 3});
        REQUIRE(t.reshaped({3, 2}).shape == Shape{3, 2});
        REQUIRE_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
    }
    SECTION("finite check") {
        Tensor t({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
        REQUIRE_FALSE(t.all_finite());
        REQUIRE_THROWS_AS(ensure_finite(t, "test"), std::runtime_error);
    }
}

TEST_CASE("rng is deterministic in the seed") {
    Rng a(42), b(42), c(43);
    std::vector<double> va, vb, vc;
    for (int i = 0; i < 16; ++i) {
        va.push_back(a.gaussian());
        vb.push_back(b.gaussian());
        vc.push_back(c.gaussian());
    }
    REQUIRE(va == vb);
    REQUIRE(va != vc);
    for (double v : va) REQUIRE(std::isfinite(v));
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace certlip {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

/// Dense n-dimensional array of doubles, row-major.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t dim(size_t i) const { return shape.at(i); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    // slow-path multi-index access, used by tests and setup code
    double& at(std::initializer_list<size_t> idx) { return data[offset(idx)]; }
    double at(std::initializer_list<size_t> idx) const { return data[offset(idx)]; }

    size_t offset(std::initializer_list<size_t> idx) const {
        if (idx.size() != shape.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
        size_t off = 0, i = 0;
        for (size_t v : idx) {
            if (v >= shape[i]) throw std::out_of_range("Tensor::at: index out of range");
            off = off * shape[i] + v;
            ++i;
        }
        return off;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("reshape: element count mismatch " + shape_str(shape) +
                                        " -> " + shape_str(s));
        Tensor out(std::move(s), data);
        return out;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void ensure_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw std::runtime_error(std::string(op) + ": non-finite value in result");
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Box-Muller without caching so draw sequences are a pure
// function of the seed and draw index.
// ---------------------------------------------------------------------------

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(uint64_t seed) : gen(seed) {}

    double uniform() {  // [0,1)
        return double(gen() >> 11) * 0x1.0p-53;
    }
    double gaussian() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    uint64_t next_u64() { return gen(); }
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2);
    x ^= x >> 33;
    x *= 0xFF51AFD7ED558CCDull;
    x ^= x >> 33;
    return x;
}

inline Tensor gaussian_tensor(Shape s, Rng& rng, double std_dev = 1.0) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = std_dev * rng.gaussian();
    return t;
}

// ---------------------------------------------------------------------------
// Internal parallelism, capped by CERTLIP_THREADS (default 1 so results are
// bit-reproducible without any setup). Only used for loops whose iterations
// write disjoint slices, so any thread count gives identical bits.
// ---------------------------------------------------------------------------

namespace detail {

inline size_t thread_cap() {
    static size_t cap = [] {
        const char* env = std::getenv("CERTLIP_THREADS");
        if (!env) return size_t{1};
        long v = std::strtol(env, nullptr, 10);
        if (v < 1) return size_t{1};
        return size_t(v);
    }();
    return cap;
}

inline void parallel_for(size_t n, const std::function<void(size_t, size_t)>& body) {
    size_t threads = std::min(thread_cap(), n);
    if (threads <= 1) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    size_t chunk = (n + threads - 1) / threads;
    for (size_t t = 0; t < threads; ++t) {
        size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, zero padding) and its adjoints.
// Summation order is fixed: ci outer, then kernel rows, then kernel columns.
// ---------------------------------------------------------------------------

inline size_t conv_out_extent(size_t in, size_t k, size_t stride, size_t pad) {
    if (k > in + 2 * pad)
        throw std::invalid_argument("conv2d: kernel extent " + std::to_string(k) +
                                    " exceeds padded input " + std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, size_t stride, size_t pad) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw std::invalid_argument("conv2d: expects input [N,C,H,W] and kernel [Co,Ci,kh,kw]");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    const size_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != Ci)
        throw std::invalid_argument("conv2d: channel mismatch, input C=" + std::to_string(Ci) +
                                    " kernel Ci=" + std::to_string(kernel.dim(1)));
    const size_t Ho = conv_out_extent(H, kh, stride, pad);
    const size_t Wo = conv_out_extent(W, kw, stride, pad);

    Tensor out({N, Co, Ho, Wo});
    const double* in = input.ptr();
    const double* k = kernel.ptr();
    double* o = out.ptr();

    detail::parallel_for(N, [&](size_t n0, size_t n1) {
        for (size_t n = n0; n < n1; ++n) {
            for (size_t co = 0; co < Co; ++co) {
                for (size_t oh = 0; oh < Ho; ++oh) {
                    const long ih0 = long(oh * stride) - long(pad);
                    const size_t rlo = size_t(std::max(0l, -ih0));
                    const size_t rhi = std::min(kh, size_t(std::max(0l, long(H) - ih0)));
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        const long iw0 = long(ow * stride) - long(pad);
                        const size_t clo = size_t(std::max(0l, -iw0));
                        const size_t chi = std::min(kw, size_t(std::max(0l, long(W) - iw0)));
                        double acc = 0.0;
                        for (size_t ci = 0; ci < Ci; ++ci) {
                            const double* inc = in + ((n * Ci + ci) * H) * W;
                            const double* kc = k + ((co * Ci + ci) * kh) * kw;
                            for (size_t r = rlo; r < rhi; ++r) {
                                const double* row = inc + size_t(ih0 + long(r)) * W + size_t(iw0);
                                const double* krow = kc + r * kw;
                                for (size_t c = clo; c < chi; ++c) acc += row[c] * krow[c];
                            }
                        }
                        o[((n * Co + co) * Ho + oh) * Wo + ow] = acc;
                    }
                }
            }
        }
    });
    ensure_finite(out, "conv2d");
    return out;
}

/// Transpose of the conv2d linear map: maps output-space cotangents back to
/// input space. Satisfies <conv2d(x),y> == <x, conv2d_adjoint(y)>.
inline Tensor conv2d_adjoint(const Tensor& cotangent, const Tensor& kernel, size_t stride,
                             size_t pad, const Shape& input_shape) {
    if (cotangent.rank() != 4 || kernel.rank() != 4 || input_shape.size() != 4)
        throw std::invalid_argument("conv2d_adjoint: rank mismatch");
    const size_t N = input_shape[0], Ci = input_shape[1], H = input_shape[2], W = input_shape[3];
    const size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != Ci) throw std::invalid_argument("conv2d_adjoint: channel mismatch");
    const size_t Ho = conv_out_extent(H, kh, stride, pad);
    const size_t Wo = conv_out_extent(W, kw, stride, pad);
    if (cotangent.dim(0) != N || cotangent.dim(1) != Co || cotangent.dim(2) != Ho ||
        cotangent.dim(3) != Wo)
        throw std::invalid_argument("conv2d_adjoint: cotangent shape " + shape_str(cotangent.shape) +
                                    " does not match conv output for input " + shape_str(input_shape));

    Tensor out(input_shape);
    const double* g = cotangent.ptr();
    const double* k = kernel.ptr();
    double* o = out.ptr();

    detail::parallel_for(N, [&](size_t n0, size_t n1) {
        for (size_t n = n0; n < n1; ++n) {
            for (size_t co = 0; co < Co; ++co) {
                for (size_t oh = 0; oh < Ho; ++oh) {
                    const long ih0 = long(oh * stride) - long(pad);
                    const size_t rlo = size_t(std::max(0l, -ih0));
                    const size_t rhi = std::min(kh, size_t(std::max(0l, long(H) - ih0)));
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        const long iw0 = long(ow * stride) - long(pad);
                        const size_t clo = size_t(std::max(0l, -iw0));
                        const size_t chi = std::min(kw, size_t(std::max(0l, long(W) - iw0)));
                        const double gv = g[((n * Co + co) * Ho + oh) * Wo + ow];
                        if (gv == 0.0) continue;
                        for (size_t ci = 0; ci < Ci; ++ci) {
                            double* oc = o + ((n * Ci + ci) * H) * W;
                            const double* kc = k + ((co * Ci + ci) * kh) * kw;
                            for (size_t r = rlo; r < rhi; ++r) {
                                double* row = oc + size_t(ih0 + long(r)) * W + size_t(iw0);
                                const double* krow = kc + r * kw;
                                for (size_t c = clo; c < chi; ++c) row[c] += gv * krow[c];
                            }
                        }
                    }
                }
            }
        }
    });
    ensure_finite(out, "conv2d_adjoint");
    return out;
}

/// Gradient of conv2d with respect to the kernel.
inline Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& cotangent, size_t stride,
                                 size_t pad, const Shape& kernel_shape) {
    const size_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const size_t Co = kernel_shape[0], kh = kernel_shape[2], kw = kernel_shape[3];
    if (kernel_shape[1] != Ci) throw std::invalid_argument("conv2d_kernel_grad: channel mismatch");
    const size_t Ho = conv_out_extent(H, kh, stride, pad);
    const size_t Wo = conv_out_extent(W, kw, stride, pad);
    if (cotangent.dim(0) != N || cotangent.dim(1) != Co || cotangent.dim(2) != Ho ||
        cotangent.dim(3) != Wo)
        throw std::invalid_argument("conv2d_kernel_grad: cotangent shape mismatch");

    Tensor out(kernel_shape);
    const double* in = input.ptr();
    const double* g = cotangent.ptr();
    double* o = out.ptr();

    detail::parallel_for(Co, [&](size_t co0, size_t co1) {
        for (size_t co = co0; co < co1; ++co) {
            for (size_t n = 0; n < N; ++n) {
                for (size_t oh = 0; oh < Ho; ++oh) {
                    const long ih0 = long(oh * stride) - long(pad);
                    const size_t rlo = size_t(std::max(0l, -ih0));
                    const size_t rhi = std::min(kh, size_t(std::max(0l, long(H) - ih0)));
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        const long iw0 = long(ow * stride) - long(pad);
                        const size_t clo = size_t(std::max(0l, -iw0));
                        const size_t chi = std::min(kw, size_t(std::max(0l, long(W) - iw0)));
                        const double gv = g[((n * Co + co) * Ho + oh) * Wo + ow];
                        if (gv == 0.0) continue;
                        for (size_t ci = 0; ci < Ci; ++ci) {
                            const double* inc = in + ((n * Ci + ci) * H) * W;
                            double* kc = o + ((co * Ci + ci) * kh) * kw;
                            for (size_t r = rlo; r < rhi; ++r) {
                                const double* row = inc + size_t(ih0 + long(r)) * W + size_t(iw0);
                                double* krow = kc + r * kw;
                                for (size_t c = clo; c < chi; ++c) krow[c] += gv * row[c];
                            }
                        }
                    }
                }
            }
        }
    });
    ensure_finite(out, "conv2d_kernel_grad");
    return out;
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

inline Tensor dense_apply(const Tensor& input, const Tensor& weight, const Tensor* bias = nullptr) {
    if (input.rank() != 2 || weight.rank() != 2)
        throw std::invalid_argument("dense_apply: expects input [N,d] and weight [m,d]");
    const size_t N = input.dim(0), d = input.dim(1), m = weight.dim(0);
    if (weight.dim(1) != d)
        throw std::invalid_argument("dense_apply: inner dimension mismatch " + shape_str(input.shape) +
                                    " vs " + shape_str(weight.shape));
    if (bias && (bias->rank() != 1 || bias->dim(0) != m))
        throw std::invalid_argument("dense_apply: bias shape mismatch");

    Tensor out({N, m});
    detail::parallel_for(N, [&](size_t n0, size_t n1) {
        for (size_t n = n0; n < n1; ++n) {
            const double* x = input.ptr() + n * d;
            double* o = out.ptr() + n * m;
            for (size_t j = 0; j < m; ++j) {
                const double* w = weight.ptr() + j * d;
                double acc = bias ? (*bias)[j] : 0.0;
                for (size_t k = 0; k < d; ++k) acc += w[k] * x[k];
                o[j] = acc;
            }
        }
    });
    ensure_finite(out, "dense_apply");
    return out;
}

// ---------------------------------------------------------------------------
// MinMax activation: consecutive channel pairs (2i, 2i+1) -> (min, max).
// Routing codes record the source slot of each output for the backward pass;
// on ties both outputs route to the first element of the pair.
// ---------------------------------------------------------------------------

inline Tensor minmax_apply(const Tensor& input, std::vector<uint8_t>* route = nullptr) {
    if (input.rank() < 2) throw std::invalid_argument("minmax_apply: needs a channel axis");
    const size_t C = input.dim(1);
    if (C % 2 != 0) throw std::invalid_argument("minmax_apply: odd channel count " + std::to_string(C));
    const size_t N = input.dim(0);
    size_t inner = 1;
    for (size_t i = 2; i < input.rank(); ++i) inner *= input.dim(i);

    Tensor out(input.shape);
    if (route) route->assign(N * (C / 2) * inner, 0);
    const double* in = input.ptr();
    double* o = out.ptr();
    for (size_t n = 0; n < N; ++n) {
        for (size_t p = 0; p < C / 2; ++p) {
            const size_t base_a = (n * C + 2 * p) * inner;
            const size_t base_b = (n * C + 2 * p + 1) * inner;
            for (size_t i = 0; i < inner; ++i) {
                const double a = in[base_a + i], b = in[base_b + i];
                // bit0: source of min, bit1: source of max (0 = first slot)
                uint8_t code;
                if (a < b) {
                    o[base_a + i] = a;
                    o[base_b + i] = b;
                    code = 0 | (1 << 1);
                } else if (a > b) {
                    o[base_a + i] = b;
                    o[base_b + i] = a;
                    code = 1 | (0 << 1);
                } else {
                    o[base_a + i] = a;
                    o[base_b + i] = a;
                    code = 0 | (0 << 1);
                }
                if (route) (*route)[(n * (C / 2) + p) * inner + i] = code;
            }
        }
    }
    ensure_finite(out, "minmax_apply");
    return out;
}

inline Tensor minmax_backward(const Tensor& cotangent, const std::vector<uint8_t>& route) {
    const size_t C = cotangent.dim(1);
    const size_t N = cotangent.dim(0);
    size_t inner = 1;
    for (size_t i = 2; i < cotangent.rank(); ++i) inner *= cotangent.dim(i);
    Tensor out(cotangent.shape);
    const double* g = cotangent.ptr();
    double* o = out.ptr();
    for (size_t n = 0; n < N; ++n) {
        for (size_t p = 0; p < C / 2; ++p) {
            const size_t base_a = (n * C + 2 * p) * inner;
            const size_t base_b = (n * C + 2 * p + 1) * inner;
            for (size_t i = 0; i < inner; ++i) {
                const uint8_t code = route[(n * (C / 2) + p) * inner + i];
                const size_t min_src = (code & 1) ? base_b : base_a;
                const size_t max_src = (code & 2) ? base_b : base_a;
                o[min_src + i] += g[base_a + i];
                o[max_src + i] += g[base_b + i];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Small elementwise helpers
// ---------------------------------------------------------------------------

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline void axpy(Tensor& y, double alpha, const Tensor& x) {
    if (!y.same_shape(x)) throw std::invalid_argument("axpy: shape mismatch");
    for (size_t i = 0; i < y.numel(); ++i) y[i] += alpha * x[i];
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor out = a;
    for (size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

inline Tensor scaled(const Tensor& a, double c) {
    Tensor out = a;
    for (double& v : out.data) v *= c;
    return out;
}

inline uint64_t fnv1a_hash(const void* bytes, size_t len, uint64_t h = 0xCBF29CE484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace certlip

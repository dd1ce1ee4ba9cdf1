#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "tape.hpp"
#include "tensor.hpp"

namespace certlip {

enum class LayerKind {
    Stem,
    MinMax,
    LinearResidualBlock,
    ConvBlock,
    ConventionalResidualBlock,
    NeckConv,
    Flatten,
    NeckDense,
    DenseHead,
};

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Stem: return "stem";
        case LayerKind::MinMax: return "minmax";
        case LayerKind::LinearResidualBlock: return "linear_residual";
        case LayerKind::ConvBlock: return "conv_block";
        case LayerKind::ConventionalResidualBlock: return "conventional_residual";
        case LayerKind::NeckConv: return "neck_conv";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::NeckDense: return "neck_dense";
        case LayerKind::DenseHead: return "head";
    }
    return "?";
}

struct Layer {
    LayerKind kind;
    std::string name;
    // conv family
    size_t in_channels = 0, out_channels = 0;
    size_t kernel = 0, stride = 1, padding = 0;
    double depth_scale = 1.0;
    // dense family
    size_t in_dim = 0, out_dim = 0;
    bool bias = false;
    // per-instance shapes, channel-first; dense layers use {d}
    Shape in_shape, out_shape;
};

enum class Family { LiResNet, ConvNet, ResNet };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::LiResNet: return "liresnet";
        case Family::ConvNet: return "convnet";
        case Family::ResNet: return "resnet";
    }
    return "?";
}

inline Family family_from_name(const std::string& s) {
    if (s == "liresnet") return Family::LiResNet;
    if (s == "convnet") return Family::ConvNet;
    if (s == "resnet") return Family::ResNet;
    throw std::invalid_argument("unknown architecture family '" + s + "'");
}

/// Declarative description of a network. The layer sequence is
///   stem, minmax, (block, minmax) x L, neck conv, minmax, flatten,
///   neck dense, minmax, head
/// where the block kind depends on the family.
struct ArchSpec {
    Family family = Family::LiResNet;
    size_t blocks = 4;
    size_t width = 16;
    size_t stem_kernel = 3, stem_stride = 1, stem_padding = 1;
    size_t block_kernel = 3;
    size_t neck_kernel = 1, neck_stride = 1;
    size_t neck_dense = 32;
    // zero means "derive from the dataset" (resolve_arch or train fill these in)
    size_t classes = 0;
    size_t in_channels = 0, in_height = 0, in_width = 0;

    bool operator==(const ArchSpec& o) const {
        return family == o.family && blocks == o.blocks && width == o.width &&
               stem_kernel == o.stem_kernel && stem_stride == o.stem_stride &&
               stem_padding == o.stem_padding && block_kernel == o.block_kernel &&
               neck_kernel == o.neck_kernel && neck_stride == o.neck_stride &&
               neck_dense == o.neck_dense && classes == o.classes &&
               in_channels == o.in_channels && in_height == o.in_height && in_width == o.in_width;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "family=" << family_name(family) << "\n"
           << "blocks=" << blocks << "\n"
           << "width=" << width << "\n"
           << "stem_kernel=" << stem_kernel << "\n"
           << "stem_stride=" << stem_stride << "\n"
           << "stem_padding=" << stem_padding << "\n"
           << "block_kernel=" << block_kernel << "\n"
           << "neck_kernel=" << neck_kernel << "\n"
           << "neck_stride=" << neck_stride << "\n"
           << "neck_dense=" << neck_dense << "\n"
           << "classes=" << classes << "\n"
           << "in_channels=" << in_channels << "\n"
           << "in_height=" << in_height << "\n"
           << "in_width=" << in_width << "\n";
        return os.str();
    }

    static ArchSpec from_text(const std::string& text) {
        ArchSpec s;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("architecture text: bad line '" + line + "'");
            std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            if (!set_field(s, key, val))
                throw std::invalid_argument("architecture text: unknown key '" + key + "'");
        }
        return s;
    }

    static bool set_field(ArchSpec& s, const std::string& key, const std::string& val) {
        auto num = [&](size_t& dst) { dst = size_t(std::stoull(val)); };
        if (key == "family") s.family = family_from_name(val);
        else if (key == "blocks") num(s.blocks);
        else if (key == "width") num(s.width);
        else if (key == "stem_kernel") num(s.stem_kernel);
        else if (key == "stem_stride") num(s.stem_stride);
        else if (key == "stem_padding") num(s.stem_padding);
        else if (key == "block_kernel") num(s.block_kernel);
        else if (key == "neck_kernel") num(s.neck_kernel);
        else if (key == "neck_stride") num(s.neck_stride);
        else if (key == "neck_dense") num(s.neck_dense);
        else if (key == "classes") num(s.classes);
        else if (key == "in_channels") num(s.in_channels);
        else if (key == "in_height") num(s.in_height);
        else if (key == "in_width") num(s.in_width);
        else return false;
        return true;
    }

    std::vector<Layer> materialize() const {
        if (width == 0 || width % 2 != 0)
            throw std::invalid_argument("architecture: width must be positive and even");
        if (classes < 2) throw std::invalid_argument("architecture: need at least 2 classes");
        if (in_channels == 0 || in_height == 0 || in_width == 0)
            throw std::invalid_argument("architecture: input geometry is unset");
        if (block_kernel % 2 == 0)
            throw std::invalid_argument("architecture: block kernel must be odd for residual shape match");
        if (neck_dense == 0 || neck_dense % 2 != 0)
            throw std::invalid_argument("architecture: neck_dense must be positive and even");

        std::vector<Layer> ls;
        size_t C = in_channels, H = in_height, W = in_width;

        auto push_minmax = [&](const std::string& nm) {
            Layer l;
            l.kind = LayerKind::MinMax;
            l.name = nm;
            l.in_shape = l.out_shape = (C > 0 && !ls.empty()) ? ls.back().out_shape : Shape{};
            ls.push_back(l);
        };

        {
            Layer l;
            l.kind = LayerKind::Stem;
            l.name = "stem";
            l.in_channels = C;
            l.out_channels = width;
            l.kernel = stem_kernel;
            l.stride = stem_stride;
            l.padding = stem_padding;
            l.in_shape = {C, H, W};
            H = conv_out_extent(H, stem_kernel, stem_stride, stem_padding);
            W = conv_out_extent(W, stem_kernel, stem_stride, stem_padding);
            C = width;
            l.out_shape = {C, H, W};
            ls.push_back(l);
        }
        push_minmax("stem_act");

        const double ds = 1.0 / std::sqrt(double(std::max<size_t>(blocks, 1)));
        for (size_t b = 0; b < blocks; ++b) {
            Layer l;
            l.name = "block" + std::to_string(b + 1);
            l.in_channels = l.out_channels = width;
            l.kernel = block_kernel;
            l.stride = 1;
            l.padding = (block_kernel - 1) / 2;
            l.in_shape = l.out_shape = {C, H, W};
            switch (family) {
                case Family::LiResNet:
                    l.kind = LayerKind::LinearResidualBlock;
                    l.depth_scale = ds;
                    break;
                case Family::ConvNet:
                    l.kind = LayerKind::ConvBlock;
                    break;
                case Family::ResNet:
                    l.kind = LayerKind::ConventionalResidualBlock;
                    break;
            }
            ls.push_back(l);
            push_minmax(l.name + "_act");
        }

        {
            Layer l;
            l.kind = LayerKind::NeckConv;
            l.name = "neck_conv";
            l.in_channels = width;
            l.out_channels = width;
            l.kernel = neck_kernel;
            l.stride = neck_stride;
            l.padding = 0;
            l.in_shape = {C, H, W};
            H = conv_out_extent(H, neck_kernel, neck_stride, 0);
            W = conv_out_extent(W, neck_kernel, neck_stride, 0);
            l.out_shape = {C, H, W};
            ls.push_back(l);
        }
        push_minmax("neck_act");

        {
            Layer l;
            l.kind = LayerKind::Flatten;
            l.name = "flatten";
            l.in_shape = {C, H, W};
            l.out_shape = {C * H * W};
            ls.push_back(l);
        }
        {
            Layer l;
            l.kind = LayerKind::NeckDense;
            l.name = "neck_dense";
            l.in_dim = C * H * W;
            l.out_dim = neck_dense;
            l.bias = true;
            l.in_shape = {l.in_dim};
            l.out_shape = {l.out_dim};
            ls.push_back(l);
        }
        {
            Layer l;
            l.kind = LayerKind::MinMax;
            l.name = "neck_dense_act";
            l.in_shape = l.out_shape = Shape{neck_dense};
            ls.push_back(l);
        }
        {
            Layer l;
            l.kind = LayerKind::DenseHead;
            l.name = "head";
            l.in_dim = neck_dense;
            l.out_dim = classes;
            l.bias = true;
            l.in_shape = {neck_dense};
            l.out_shape = {classes};
            ls.push_back(l);
        }
        return ls;
    }
};

// ---------------------------------------------------------------------------
// Network: layers plus an ordered parameter store
// ---------------------------------------------------------------------------

struct Network {
    std::optional<ArchSpec> spec;
    std::vector<Layer> layers;
    std::vector<std::pair<std::string, Tensor>> params;  // ordered for hashing and checkpoints

    Tensor& param(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw std::runtime_error("no parameter named '" + name + "'");
    }
    const Tensor& param(const std::string& name) const {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw std::runtime_error("no parameter named '" + name + "'");
    }
    bool has_param(const std::string& name) const {
        for (auto& [n, t] : params)
            if (n == name) return true;
        return false;
    }

    size_t num_classes() const {
        if (layers.empty() || layers.back().kind != LayerKind::DenseHead)
            throw std::runtime_error("network has no dense head");
        return layers.back().out_dim;
    }

    const Tensor& head_weight() const { return param(layers.back().name + ".w"); }

    Shape input_shape() const {
        for (const auto& l : layers)
            if (!l.in_shape.empty()) return l.in_shape;
        throw std::runtime_error("network has no input shape");
    }

    uint64_t param_hash() const {
        uint64_t h = 0xCBF29CE484222325ull;
        for (const auto& [n, t] : params) {
            h = fnv1a_hash(n.data(), n.size(), h);
            for (size_t d : t.shape) {
                uint64_t v = d;
                h = fnv1a_hash(&v, sizeof v, h);
            }
            h = fnv1a_hash(t.data.data(), t.data.size() * sizeof(double), h);
        }
        return h;
    }
};

inline std::vector<std::pair<std::string, Shape>> layer_param_shapes(const Layer& l) {
    switch (l.kind) {
        case LayerKind::Stem:
        case LayerKind::ConvBlock:
        case LayerKind::NeckConv:
            return {{l.name + ".w", {l.out_channels, l.in_channels, l.kernel, l.kernel}}};
        case LayerKind::LinearResidualBlock:
            return {{l.name + ".w", {l.out_channels, l.in_channels, l.kernel, l.kernel}},
                    {l.name + ".beta", {l.out_channels}}};
        case LayerKind::ConventionalResidualBlock:
            return {{l.name + ".w1", {l.out_channels, l.in_channels, l.kernel, l.kernel}},
                    {l.name + ".w2", {l.out_channels, l.out_channels, l.kernel, l.kernel}},
                    {l.name + ".beta", {l.out_channels}}};
        case LayerKind::NeckDense:
        case LayerKind::DenseHead: {
            std::vector<std::pair<std::string, Shape>> out = {{l.name + ".w", {l.out_dim, l.in_dim}}};
            if (l.bias) out.push_back({l.name + ".b", {l.out_dim}});
            return out;
        }
        case LayerKind::MinMax:
        case LayerKind::Flatten:
            return {};
    }
    return {};
}

/// Kaiming-normal initialization, beta = 1 for linear residual blocks and
/// beta = 0 for conventional ones. Deterministic in (spec, seed).
inline Network build_network(const ArchSpec& spec, uint64_t seed) {
    Network net;
    net.spec = spec;
    net.layers = spec.materialize();
    size_t layer_idx = 0;
    for (const auto& l : net.layers) {
        Rng rng(mix_seed(seed, 0x6E65740000ull + layer_idx));
        for (auto& [name, shp] : layer_param_shapes(l)) {
            Tensor t(shp);
            bool is_beta = name.size() > 5 && name.substr(name.size() - 5) == ".beta";
            bool is_bias = name.size() > 2 && name.substr(name.size() - 2) == ".b";
            if (is_beta) {
                double v = l.kind == LayerKind::ConventionalResidualBlock ? 0.0 : 1.0;
                for (double& x : t.data) x = v;
            } else if (is_bias) {
                // zeros
            } else {
                size_t fan_in = shp.size() == 4 ? shp[1] * shp[2] * shp[3] : shp[1];
                double std_dev = std::sqrt(2.0 / double(fan_in));
                for (double& x : t.data) x = std_dev * rng.gaussian();
            }
            net.params.emplace_back(name, std::move(t));
        }
        ++layer_idx;
    }
    return net;
}

/// Assemble a minimal network that is just a dense head, for tests and for
/// exercising the margin machinery in isolation.
inline Network make_head_only_network(Tensor w, std::optional<Tensor> b = std::nullopt) {
    Network net;
    Layer l;
    l.kind = LayerKind::DenseHead;
    l.name = "head";
    l.out_dim = w.dim(0);
    l.in_dim = w.dim(1);
    l.bias = b.has_value();
    l.in_shape = {l.in_dim};
    l.out_shape = {l.out_dim};
    net.layers.push_back(l);
    net.params.emplace_back("head.w", std::move(w));
    if (b) net.params.emplace_back("head.b", std::move(*b));
    return net;
}

// ---------------------------------------------------------------------------
// Equivalent kernel of a linear residual block:
//   W_eq = depth_scale * beta (x) W + Delta,  Delta[i,i,k0,k0] = 1
// so that  x + depth_scale * beta (*) conv(x, W) == conv(x, W_eq).
// ---------------------------------------------------------------------------

inline Tensor identity_kernel_delta(size_t channels, size_t kh, size_t kw) {
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("identity_kernel_delta: kernel extents must be odd");
    Tensor d({channels, channels, kh, kw});
    for (size_t i = 0; i < channels; ++i) d.at({i, i, kh / 2, kw / 2}) = 1.0;
    return d;
}

inline Tensor equivalent_kernel(const Tensor& w, const Tensor& beta, double depth_scale) {
    if (w.rank() != 4 || w.dim(0) != w.dim(1))
        throw std::invalid_argument("equivalent_kernel: kernel must be [C,C,kh,kw]");
    Tensor out = identity_kernel_delta(w.dim(0), w.dim(2), w.dim(3));
    const size_t inner = w.numel() / w.dim(0);
    for (size_t o = 0; o < w.dim(0); ++o)
        for (size_t i = 0; i < inner; ++i)
            out[o * inner + i] += depth_scale * beta[o] * w[o * inner + i];
    return out;
}

inline int t_equivalent_kernel(GradTape& tape, int w, int beta, double depth_scale) {
    const Tensor& wv = tape.val(w);
    int scaled_w = t_kernel_channel_scale(tape, w, beta, depth_scale);
    return t_add_const(tape, scaled_w, identity_kernel_delta(wv.dim(0), wv.dim(2), wv.dim(3)));
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct TapeBinding {
    std::vector<int> param_ids;  // aligned with Network::params
    int id_of(const Network& net, const std::string& name) const {
        for (size_t i = 0; i < net.params.size(); ++i)
            if (net.params[i].first == name) return param_ids[i];
        throw std::runtime_error("no parameter named '" + name + "'");
    }
};

inline TapeBinding bind_network(GradTape& tape, const Network& net, bool params_need_grad) {
    TapeBinding b;
    for (const auto& [name, t] : net.params) b.param_ids.push_back(tape.add_leaf(t, params_need_grad));
    return b;
}

/// Runs layers [begin, end) on the tape starting from node `x_id`; returns the
/// node id of the resulting activation.
inline int forward_range_on_tape(GradTape& tape, const Network& net, const TapeBinding& bind,
                                 int x_id, size_t begin, size_t end) {
    int cur = x_id;
    if (begin == 0 && end > 0) {
        // accept [N, d] or [N, C, H, W] inputs interchangeably at the entry
        Shape expect = net.input_shape();
        size_t per = 1;
        for (size_t e : expect) per *= e;
        const Tensor& v = tape.val(cur);
        if (per == 0 || v.numel() % per != 0)
            throw std::invalid_argument("forward: input size is not a multiple of the sample size");
        Shape target{v.numel() / per};
        target.insert(target.end(), expect.begin(), expect.end());
        if (v.shape != target) cur = t_reshape(tape, cur, target);
    }
    for (size_t li = begin; li < end; ++li) {
        const Layer& l = net.layers[li];
        switch (l.kind) {
            case LayerKind::Stem:
            case LayerKind::ConvBlock:
            case LayerKind::NeckConv:
                cur = t_conv2d(tape, cur, bind.id_of(net, l.name + ".w"), l.stride, l.padding);
                break;
            case LayerKind::MinMax:
                cur = t_minmax(tape, cur);
                break;
            case LayerKind::LinearResidualBlock: {
                int h = t_conv2d(tape, cur, bind.id_of(net, l.name + ".w"), l.stride, l.padding);
                int hs = t_channel_scale(tape, h, bind.id_of(net, l.name + ".beta"), l.depth_scale);
                cur = t_add(tape, cur, hs);
                break;
            }
            case LayerKind::ConventionalResidualBlock: {
                int a = t_conv2d(tape, cur, bind.id_of(net, l.name + ".w1"), l.stride, l.padding);
                int m = t_minmax(tape, a);
                int c = t_conv2d(tape, m, bind.id_of(net, l.name + ".w2"), l.stride, l.padding);
                int cs = t_channel_scale(tape, c, bind.id_of(net, l.name + ".beta"), 1.0);
                cur = t_add(tape, cur, cs);
                break;
            }
            case LayerKind::Flatten: {
                const Tensor& v = tape.val(cur);
                cur = t_reshape(tape, cur, {v.dim(0), v.numel() / v.dim(0)});
                break;
            }
            case LayerKind::NeckDense:
            case LayerKind::DenseHead: {
                int b = net.has_param(l.name + ".b") ? bind.id_of(net, l.name + ".b") : -1;
                cur = t_dense(tape, cur, bind.id_of(net, l.name + ".w"), b);
                break;
            }
        }
    }
    return cur;
}

inline int forward_on_tape(GradTape& tape, const Network& net, const TapeBinding& bind, int x_id,
                           size_t stop) {
    return forward_range_on_tape(tape, net, bind, x_id, 0, stop);
}

inline int forward_on_tape(GradTape& tape, const Network& net, const TapeBinding& bind, int x_id) {
    return forward_range_on_tape(tape, net, bind, x_id, 0, net.layers.size());
}

inline Tensor forward(const Network& net, const Tensor& batch) {
    GradTape tape;
    TapeBinding bind = bind_network(tape, net, false);
    int x = tape.add_const(batch);
    int out = forward_on_tape(tape, net, bind, x);
    return tape.val(out);
}

/// Activations just before the dense head (the subnetwork whose Lipschitz
/// bound composes with head row distances).
inline Tensor forward_prefix(const Network& net, const Tensor& batch) {
    if (net.layers.empty() || net.layers.back().kind != LayerKind::DenseHead)
        throw std::runtime_error("forward_prefix: last layer must be the dense head");
    GradTape tape;
    TapeBinding bind = bind_network(tape, net, false);
    int x = tape.add_const(batch);
    int out = forward_on_tape(tape, net, bind, x, net.layers.size() - 1);
    return tape.val(out);
}

// ---------------------------------------------------------------------------
// Checkpoints. Binary layout, little-endian:
//   magic "CERTLIP1", u32 version, u32 arch text length, arch text,
//   u32 blob count, then per blob: u32 name length, name, u8 dtype (0 = f64),
//   u32 rank, rank x u64 dims, payload doubles.
// Parameter blobs use the parameter name; training-state blobs contain '/'.
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'C', 'E', 'R', 'T', 'L', 'I', 'P', '1'};

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<char*>(b), 8);
}
inline void put_f64(std::ostream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("corrupt checkpoint (truncated)");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("corrupt checkpoint (truncated)");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}
inline double get_f64(std::istream& is) {
    uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

inline void put_blob(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(0));  // dtype f64
    put_u32(os, uint32_t(t.rank()));
    for (size_t d : t.shape) put_u64(os, d);
    for (double v : t.data) put_f64(os, v);
}

inline std::pair<std::string, Tensor> get_blob(std::istream& is) {
    uint32_t nlen = get_u32(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw std::runtime_error("corrupt checkpoint (truncated)");
    int dtype = is.get();
    if (dtype == EOF) throw std::runtime_error("corrupt checkpoint (truncated)");
    if (dtype != 0) throw std::runtime_error("corrupt checkpoint (unknown dtype)");
    uint32_t rank = get_u32(is);
    if (rank > 8) throw std::runtime_error("corrupt checkpoint (implausible rank)");
    Shape shp(rank);
    for (auto& d : shp) d = size_t(get_u64(is));
    Tensor t(shp);
    for (double& v : t.data) v = get_f64(is);
    return {std::move(name), std::move(t)};
}

}  // namespace detail

using TrainingExtras = std::map<std::string, Tensor>;

inline void save_checkpoint(const Network& net, const std::string& path,
                            const TrainingExtras* extras = nullptr) {
    if (!net.spec) throw std::runtime_error("save_checkpoint: network has no architecture spec");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    std::string arch = net.spec->to_text();
    detail::put_u32(os, uint32_t(arch.size()));
    os.write(arch.data(), std::streamsize(arch.size()));
    uint32_t count = uint32_t(net.params.size() + (extras ? extras->size() : 0));
    detail::put_u32(os, count);
    for (const auto& [name, t] : net.params) detail::put_blob(os, name, t);
    if (extras)
        for (const auto& [name, t] : *extras) detail::put_blob(os, name, t);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

struct LoadedCheckpoint {
    Network net;
    TrainingExtras extras;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8)) throw std::runtime_error("corrupt checkpoint (truncated)");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic)");
    uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    uint32_t alen = detail::get_u32(is);
    std::string arch(alen, '\0');
    if (!is.read(arch.data(), alen)) throw std::runtime_error("corrupt checkpoint (truncated)");

    LoadedCheckpoint out;
    ArchSpec spec = ArchSpec::from_text(arch);
    out.net.spec = spec;
    out.net.layers = spec.materialize();

    std::map<std::string, Tensor> blobs;
    uint32_t count = detail::get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        auto [name, t] = detail::get_blob(is);
        blobs.emplace(std::move(name), std::move(t));
    }
    for (const auto& l : out.net.layers) {
        for (auto& [name, shp] : layer_param_shapes(l)) {
            auto it = blobs.find(name);
            if (it == blobs.end())
                throw std::runtime_error("corrupt checkpoint (missing parameter '" + name + "')");
            if (it->second.shape != shp)
                throw std::runtime_error("corrupt checkpoint (shape mismatch for '" + name + "')");
            out.net.params.emplace_back(name, std::move(it->second));
            blobs.erase(it);
        }
    }
    for (auto& [name, t] : blobs) {
        if (name.find('/') == std::string::npos)
            throw std::runtime_error("corrupt checkpoint (unexpected parameter '" + name + "')");
        out.extras.emplace(name, std::move(t));
    }
    return out;
}

inline LoadedCheckpoint load_checkpoint_expect(const std::string& path, const ArchSpec& expect) {
    LoadedCheckpoint c = load_checkpoint(path);
    if (!(*c.net.spec == expect))
        throw std::runtime_error("checkpoint architecture does not match the requested spec");
    return c;
}

}  // namespace certlip

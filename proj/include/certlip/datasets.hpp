#pragma once

#include <fstream>
#include <ostream>

#include "tensor.hpp"

namespace certlip {

struct Dataset {
    Tensor inputs;  // [N,C,H,W]
    std::vector<int> labels;
    size_t num_classes = 0;

    size_t size() const { return labels.size(); }
    Shape sample_shape() const { return {inputs.dim(1), inputs.dim(2), inputs.dim(3)}; }

    Tensor row(size_t n) const {
        const size_t d = inputs.numel() / inputs.dim(0);
        Tensor out({1, inputs.dim(1), inputs.dim(2), inputs.dim(3)});
        std::copy(inputs.ptr() + n * d, inputs.ptr() + (n + 1) * d, out.ptr());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Gaussian blobs: k classes with centers placed by seeded rejection sampling
// so that every pair of centers is at least `separation` apart.
// ---------------------------------------------------------------------------

struct BlobSpec {
    size_t classes = 2;
    size_t dim = 2;
    double separation = 1.0;
    size_t per_class = 100;
    double noise = 0.1;
    uint64_t seed = 0;
};

inline std::vector<std::vector<double>> blob_centers(const BlobSpec& spec) {
    if (spec.classes < 2) throw std::invalid_argument("gaussian blobs: need at least 2 classes");
    if (spec.dim == 0) throw std::invalid_argument("gaussian blobs: dimension must be positive");
    if (!(spec.separation > 0)) throw std::invalid_argument("gaussian blobs: separation must be positive");
    Rng rng(mix_seed(spec.seed, 0x626C6F62ull));
    double side = spec.separation * (std::ceil(std::pow(double(spec.classes), 1.0 / double(spec.dim))) + 1.0);
    std::vector<std::vector<double>> centers;
    size_t rejects = 0;
    while (centers.size() < spec.classes) {
        std::vector<double> c(spec.dim);
        for (double& v : c) v = side * rng.uniform();
        bool ok = true;
        for (const auto& prev : centers) {
            double d2 = 0.0;
            for (size_t i = 0; i < spec.dim; ++i) d2 += (c[i] - prev[i]) * (c[i] - prev[i]);
            if (d2 < spec.separation * spec.separation) {
                ok = false;
                break;
            }
        }
        if (ok) {
            centers.push_back(std::move(c));
            rejects = 0;
        } else if (++rejects >= 10000) {
            side *= 1.5;
            rejects = 0;
        }
    }
    return centers;
}

inline Dataset gen_gaussian_blobs(const BlobSpec& spec) {
    if (spec.per_class == 0) throw std::invalid_argument("gaussian blobs: per_class must be positive");
    auto centers = blob_centers(spec);
    Rng rng(mix_seed(spec.seed, 0x73616D70ull));
    const size_t N = spec.classes * spec.per_class;
    Dataset ds;
    ds.inputs = Tensor({N, 1, 1, spec.dim});
    ds.labels.resize(N);
    ds.num_classes = spec.classes;
    size_t n = 0;
    for (size_t c = 0; c < spec.classes; ++c)
        for (size_t s = 0; s < spec.per_class; ++s, ++n) {
            ds.labels[n] = int(c);
            for (size_t i = 0; i < spec.dim; ++i)
                ds.inputs[n * spec.dim + i] = centers[c][i] + spec.noise * rng.gaussian();
        }
    return ds;
}

// ---------------------------------------------------------------------------
// Concentric rings: class c lives on a circle of radius radii[c] plus radial
// noise. Not linearly separable for 2+ rings around a common center.
// ---------------------------------------------------------------------------

inline Dataset gen_concentric_rings(size_t per_class, const std::vector<double>& radii, double noise,
                                    uint64_t seed) {
    if (per_class == 0) throw std::invalid_argument("rings: per_class must be positive");
    if (radii.size() < 2) throw std::invalid_argument("rings: need at least 2 radii");
    if (!(radii[0] > 0)) throw std::invalid_argument("rings: radii must be positive");
    for (size_t i = 1; i < radii.size(); ++i)
        if (!(radii[i] - radii[i - 1] > 4.0 * noise))
            throw std::invalid_argument("rings: radius gaps must exceed 4x the noise scale");
    Rng rng(mix_seed(seed, 0x72696E67ull));
    const size_t k = radii.size(), N = k * per_class;
    Dataset ds;
    ds.inputs = Tensor({N, 1, 1, 2});
    ds.labels.resize(N);
    ds.num_classes = k;
    size_t n = 0;
    for (size_t c = 0; c < k; ++c)
        for (size_t s = 0; s < per_class; ++s, ++n) {
            ds.labels[n] = int(c);
            const double theta = 2.0 * M_PI * rng.uniform();
            const double r = radii[c] + noise * rng.gaussian();
            ds.inputs[n * 2 + 0] = r * std::cos(theta);
            ds.inputs[n * 2 + 1] = r * std::sin(theta);
        }
    return ds;
}

// ---------------------------------------------------------------------------
// IDX files (the MNIST container format). Big-endian magic and dimensions.
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t idx_read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("idx: truncated file while reading ") + what);
    return uint32_t(b[0]) << 24 | uint32_t(b[1]) << 16 | uint32_t(b[2]) << 8 | uint32_t(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("idx: cannot open '" + images_path + "'");
    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw std::runtime_error("idx: cannot open '" + labels_path + "'");

    uint32_t magic_i = detail::idx_read_u32(imgs, "image magic");
    if (magic_i != 0x00000803u)
        throw std::runtime_error("idx: bad magic in image file (expected 0x00000803)");
    uint32_t n_img = detail::idx_read_u32(imgs, "image count");
    uint32_t H = detail::idx_read_u32(imgs, "image height");
    uint32_t W = detail::idx_read_u32(imgs, "image width");

    uint32_t magic_l = detail::idx_read_u32(labs, "label magic");
    if (magic_l != 0x00000801u)
        throw std::runtime_error("idx: bad magic in label file (expected 0x00000801)");
    uint32_t n_lab = detail::idx_read_u32(labs, "label count");
    if (n_img != n_lab)
        throw std::runtime_error("idx: image/label count mismatch (" + std::to_string(n_img) + " vs " +
                                 std::to_string(n_lab) + ")");

    Dataset ds;
    ds.inputs = Tensor({n_img, 1, H, W});
    ds.labels.resize(n_img);
    std::vector<unsigned char> buf(size_t(H) * W);
    int max_label = 0;
    for (uint32_t n = 0; n < n_img; ++n) {
        if (!imgs.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
            throw std::runtime_error("idx: truncated image data");
        for (size_t i = 0; i < buf.size(); ++i)
            ds.inputs[size_t(n) * buf.size() + i] = double(buf[i]) / 255.0;
        int lab = labs.get();
        if (lab == EOF) throw std::runtime_error("idx: truncated label data");
        ds.labels[n] = lab;
        max_label = std::max(max_label, lab);
    }
    ds.num_classes = size_t(max_label) + 1;
    return ds;
}

// ---------------------------------------------------------------------------
// Splits and batching
// ---------------------------------------------------------------------------

/// Stratified, deterministic 80/20 split: within each class, the first 80%
/// (by original order) go to train.
inline std::pair<Dataset, Dataset> split_80_20(const Dataset& ds) {
    std::vector<size_t> per_class(ds.num_classes, 0), seen(ds.num_classes, 0);
    for (int l : ds.labels) per_class[size_t(l)]++;
    std::vector<size_t> train_idx, test_idx;
    for (size_t n = 0; n < ds.size(); ++n) {
        const size_t c = size_t(ds.labels[n]);
        const size_t cut = per_class[c] * 4 / 5;
        (seen[c]++ < cut ? train_idx : test_idx).push_back(n);
    }
    auto take = [&](const std::vector<size_t>& idx) {
        Dataset out;
        const size_t d = ds.inputs.numel() / ds.inputs.dim(0);
        Shape shp = ds.inputs.shape;
        shp[0] = idx.size();
        out.inputs = Tensor(shp);
        out.labels.resize(idx.size());
        out.num_classes = ds.num_classes;
        for (size_t i = 0; i < idx.size(); ++i) {
            std::copy(ds.inputs.ptr() + idx[i] * d, ds.inputs.ptr() + (idx[i] + 1) * d,
                      out.inputs.ptr() + i * d);
            out.labels[i] = ds.labels[idx[i]];
        }
        return out;
    };
    return {take(train_idx), take(test_idx)};
}

struct Batch {
    Tensor inputs;
    std::vector<int> labels;
};

/// Deterministic batching: the permutation is a pure function of (seed, epoch).
/// The final partial batch is kept.
inline std::vector<Batch> batches(const Dataset& ds, size_t batch_size, bool shuffle, uint64_t seed,
                                  size_t epoch) {
    if (batch_size == 0) throw std::invalid_argument("batches: batch size must be positive");
    std::vector<size_t> perm(ds.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    if (shuffle) {
        std::mt19937_64 gen(mix_seed(seed, 0x65706F6368ull + epoch));
        for (size_t i = perm.size(); i > 1; --i) {
            size_t j = gen() % i;
            std::swap(perm[i - 1], perm[j]);
        }
    }
    const size_t d = ds.inputs.numel() / std::max<size_t>(ds.inputs.dim(0), 1);
    std::vector<Batch> out;
    for (size_t start = 0; start < perm.size(); start += batch_size) {
        const size_t n = std::min(batch_size, perm.size() - start);
        Batch b;
        Shape shp = ds.inputs.shape;
        shp[0] = n;
        b.inputs = Tensor(shp);
        b.labels.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const size_t src = perm[start + i];
            std::copy(ds.inputs.ptr() + src * d, ds.inputs.ptr() + (src + 1) * d, b.inputs.ptr() + i * d);
            b.labels[i] = ds.labels[src];
        }
        out.push_back(std::move(b));
    }
    return out;
}

inline void export_csv(const Dataset& ds, std::ostream& os) {
    const size_t d = ds.inputs.numel() / std::max<size_t>(ds.inputs.dim(0), 1);
    os << "label";
    for (size_t i = 0; i < d; ++i) os << ",x" << i;
    os << "\n";
    char buf[64];
    for (size_t n = 0; n < ds.size(); ++n) {
        os << ds.labels[n];
        for (size_t i = 0; i < d; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.inputs[n * d + i]);
            os << "," << buf;
        }
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// Declarative dataset description, shared by configs and the CLI.
// ---------------------------------------------------------------------------

struct DatasetSpec {
    enum class Kind { Blobs, Rings, Idx };
    Kind kind = Kind::Blobs;
    BlobSpec blob;
    // rings
    size_t ring_classes = 2;
    size_t ring_per_class = 100;
    double ring_radius0 = 1.0;
    double ring_radius_step = 1.0;
    double ring_noise = 0.05;
    uint64_t ring_seed = 0;
    // idx
    std::string idx_images, idx_labels;

    Dataset materialize() const {
        switch (kind) {
            case Kind::Blobs: return gen_gaussian_blobs(blob);
            case Kind::Rings: {
                std::vector<double> radii(ring_classes);
                for (size_t i = 0; i < ring_classes; ++i)
                    radii[i] = ring_radius0 + double(i) * ring_radius_step;
                return gen_concentric_rings(ring_per_class, radii, ring_noise, ring_seed);
            }
            case Kind::Idx: return load_idx(idx_images, idx_labels);
        }
        throw std::logic_error("unreachable");
    }
};

}  // namespace certlip

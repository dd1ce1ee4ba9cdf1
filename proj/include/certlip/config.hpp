#pragma once

#include <sstream>
#include <tuple>

#include "training.hpp"

namespace certlip {

/// Full description of a run: dataset, architecture, training options, and
/// output location. Parsed from a line-oriented sectioned key=value format;
/// parse(serialize(c)) is the identity.
struct RunConfig {
    TrainConfig train;
    std::string out_dir;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return u;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    size_t lineno = 0;
    bool saw_dataset_kind = false;
    std::vector<std::tuple<std::string, std::string, size_t>> dataset_kv;

    while (std::getline(is, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": malformed section header");
            section = s.substr(1, s.size() - 2);
            if (section != "dataset" && section != "architecture" && section != "train" &&
                section != "output")
                throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown section [" +
                                            section + "]");
            continue;
        }
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        if (section.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": key outside any section");

        if (section == "dataset") {
            if (key == "kind") saw_dataset_kind = true;
            dataset_kv.emplace_back(key, val, lineno);
        } else if (section == "architecture") {
            if (!ArchSpec::set_field(cfg.train.arch, key, val))
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unknown architecture key '" + key + "'");
        } else if (section == "train") {
            if (key == "loss") cfg.train.loss = loss_kind_from_name(val);
            else if (key == "eps") cfg.train.eps = detail::parse_double(val, key);
            else if (key == "lambda") cfg.train.lambda = detail::parse_double(val, key);
            else if (key == "epochs") cfg.train.epochs = size_t(detail::parse_u64(val, key));
            else if (key == "batch_size") cfg.train.batch_size = size_t(detail::parse_u64(val, key));
            else if (key == "lr") cfg.train.lr = detail::parse_double(val, key);
            else if (key == "seed") cfg.train.seed = detail::parse_u64(val, key);
            else if (key == "power_iters") cfg.train.power_iters = size_t(detail::parse_u64(val, key));
            else if (key == "lookahead") cfg.train.lookahead = detail::parse_bool(val, key);
            else if (key == "lookahead_k") cfg.train.lookahead_k = size_t(detail::parse_u64(val, key));
            else if (key == "lookahead_alpha") cfg.train.lookahead_alpha = detail::parse_double(val, key);
            else if (key == "f32") cfg.train.f32 = detail::parse_bool(val, key);
            else if (key == "safety") cfg.train.safety = detail::parse_double(val, key);
            else
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unknown train key '" + key + "'");
        } else {  // output
            if (key == "dir") cfg.out_dir = val;
            else
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unknown output key '" + key + "'");
        }
    }

    if (!dataset_kv.empty() && !saw_dataset_kind)
        throw std::invalid_argument("config: [dataset] section needs a 'kind' key");
    DatasetSpec& d = cfg.train.data;
    for (auto& [key, val, lineno] : dataset_kv) {
        if (key == "kind") {
            if (val == "blobs") d.kind = DatasetSpec::Kind::Blobs;
            else if (val == "rings") d.kind = DatasetSpec::Kind::Rings;
            else if (val == "idx") d.kind = DatasetSpec::Kind::Idx;
            else
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unknown dataset kind '" + val + "'");
        }
    }
    for (auto& [key, val, lineno] : dataset_kv) {
        if (key == "kind") continue;
        bool ok = false;
        switch (d.kind) {
            case DatasetSpec::Kind::Blobs:
                ok = true;
                if (key == "classes") d.blob.classes = size_t(detail::parse_u64(val, key));
                else if (key == "dim") d.blob.dim = size_t(detail::parse_u64(val, key));
                else if (key == "separation") d.blob.separation = detail::parse_double(val, key);
                else if (key == "per_class") d.blob.per_class = size_t(detail::parse_u64(val, key));
                else if (key == "noise") d.blob.noise = detail::parse_double(val, key);
                else if (key == "seed") d.blob.seed = detail::parse_u64(val, key);
                else ok = false;
                break;
            case DatasetSpec::Kind::Rings:
                ok = true;
                if (key == "classes") d.ring_classes = size_t(detail::parse_u64(val, key));
                else if (key == "per_class") d.ring_per_class = size_t(detail::parse_u64(val, key));
                else if (key == "radius0") d.ring_radius0 = detail::parse_double(val, key);
                else if (key == "radius_step") d.ring_radius_step = detail::parse_double(val, key);
                else if (key == "noise") d.ring_noise = detail::parse_double(val, key);
                else if (key == "seed") d.ring_seed = detail::parse_u64(val, key);
                else ok = false;
                break;
            case DatasetSpec::Kind::Idx:
                ok = true;
                if (key == "images") d.idx_images = val;
                else if (key == "labels") d.idx_labels = val;
                else ok = false;
                break;
        }
        if (!ok)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": unknown dataset key '" + key + "' for this kind");
    }
    return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
    using detail::fmt_g17;
    std::ostringstream os;
    const DatasetSpec& d = cfg.train.data;
    os << "[dataset]\n";
    switch (d.kind) {
        case DatasetSpec::Kind::Blobs:
            os << "kind = blobs\n"
               << "classes = " << d.blob.classes << "\n"
               << "dim = " << d.blob.dim << "\n"
               << "separation = " << fmt_g17(d.blob.separation) << "\n"
               << "per_class = " << d.blob.per_class << "\n"
               << "noise = " << fmt_g17(d.blob.noise) << "\n"
               << "seed = " << d.blob.seed << "\n";
            break;
        case DatasetSpec::Kind::Rings:
            os << "kind = rings\n"
               << "classes = " << d.ring_classes << "\n"
               << "per_class = " << d.ring_per_class << "\n"
               << "radius0 = " << fmt_g17(d.ring_radius0) << "\n"
               << "radius_step = " << fmt_g17(d.ring_radius_step) << "\n"
               << "noise = " << fmt_g17(d.ring_noise) << "\n"
               << "seed = " << d.ring_seed << "\n";
            break;
        case DatasetSpec::Kind::Idx:
            os << "kind = idx\n"
               << "images = " << d.idx_images << "\n"
               << "labels = " << d.idx_labels << "\n";
            break;
    }
    const ArchSpec& a = cfg.train.arch;
    os << "\n[architecture]\n";
    {
        std::istringstream arch(a.to_text());
        std::string line;
        while (std::getline(arch, line)) {
            size_t eq = line.find('=');
            os << line.substr(0, eq) << " = " << line.substr(eq + 1) << "\n";
        }
    }
    os << "\n[train]\n"
       << "loss = " << loss_kind_name(cfg.train.loss) << "\n"
       << "eps = " << fmt_g17(cfg.train.eps) << "\n"
       << "lambda = " << fmt_g17(cfg.train.lambda) << "\n"
       << "epochs = " << cfg.train.epochs << "\n"
       << "batch_size = " << cfg.train.batch_size << "\n"
       << "lr = " << fmt_g17(cfg.train.lr) << "\n"
       << "seed = " << cfg.train.seed << "\n"
       << "power_iters = " << cfg.train.power_iters << "\n"
       << "lookahead = " << (cfg.train.lookahead ? "true" : "false") << "\n"
       << "lookahead_k = " << cfg.train.lookahead_k << "\n"
       << "lookahead_alpha = " << fmt_g17(cfg.train.lookahead_alpha) << "\n"
       << "f32 = " << (cfg.train.f32 ? "true" : "false") << "\n"
       << "safety = " << fmt_g17(cfg.train.safety) << "\n";
    os << "\n[output]\n"
       << "dir = " << cfg.out_dir << "\n";
    return os.str();
}

/// Fill architecture fields that are derivable from the dataset description
/// (classes and input geometry left at zero mean "take it from the data").
inline void resolve_arch(RunConfig& cfg) {
    ArchSpec& a = cfg.train.arch;
    const DatasetSpec& d = cfg.train.data;
    size_t classes = 0, C = 0, H = 0, W = 0;
    switch (d.kind) {
        case DatasetSpec::Kind::Blobs:
            classes = d.blob.classes;
            C = 1; H = 1; W = d.blob.dim;
            break;
        case DatasetSpec::Kind::Rings:
            classes = d.ring_classes;
            C = 1; H = 1; W = 2;
            break;
        case DatasetSpec::Kind::Idx: {
            Dataset ds = load_idx(d.idx_images, d.idx_labels);
            classes = ds.num_classes;
            Shape s = ds.sample_shape();
            C = s[0]; H = s[1]; W = s[2];
            break;
        }
    }
    if (a.classes == 0) a.classes = classes;
    if (a.in_channels == 0) a.in_channels = C;
    if (a.in_height == 0) a.in_height = H;
    if (a.in_width == 0) a.in_width = W;
}

}  // namespace certlip

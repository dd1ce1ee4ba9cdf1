// Command line front end: train, certify, attack, lipschitz, report.
//
// Exit codes: 0 success, 1 usage/configuration/load errors, 2 numerical
// failures (divergence, non-convergence), 3 certificate soundness alarm.
//
// Set CERTLIP_THREADS to control worker threads (default 1; keep it at 1 for
// bit-reproducible runs).

#include <CLI11.hpp>
#include <certlip/config.hpp>
#include <certlip/oracle.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace certlip;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    RunConfig cfg;
    try {
        cfg = parse_config(ss.str());
    } catch (const std::exception& e) {
        throw UsageError(std::string(e.what()) + " (in '" + path + "')");
    }
    resolve_arch(cfg);
    return cfg;
}

LoadedCheckpoint load_ckpt(const std::string& path) {
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw UsageError(std::string(e.what()) + " (checkpoint '" + path + "')");
    }
}

void require_matching_arch(const Network& net, const RunConfig& cfg) {
    if (net.spec && !(cfg.train.arch == *net.spec))
        throw UsageError("checkpoint architecture does not match the config");
}

void write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot write '" + path.string() + "'");
    os << text;
}

void write_lipschitz_csv(const LipschitzReport& rep, std::ostream& os) {
    os << "layer,method,k,residual,iterations\n";
    char buf[256];
    for (const auto& lb : rep.layers) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%zu\n", lb.layer.c_str(),
                      lb.method.c_str(), lb.k, lb.residual, lb.iterations);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%zu\n", rep.head.layer.c_str(),
                  rep.head.method.c_str(), rep.head.k, rep.head.residual, rep.head.iterations);
    os << buf;
}

void scale_margin(LipschitzReport& rep, double s) {
    rep.k_sub *= s;
    for (double& v : rep.margin.data) v *= s;
}

// ---------------------------------------------------------------------------
// Minimal SVG line plots, self contained.
// ---------------------------------------------------------------------------

struct Series {
    std::string label;
    std::vector<double> x, y;
};

std::string svg_line_plot(const std::vector<Series>& series, const std::string& xlabel,
                          const std::string& ylabel, const std::string& title) {
    const double W = 720, H = 440, L = 70, R = 24, T = 40, B = 52;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmin > xmax) { xmin = 0; xmax = 1; }
    if (ymin > ymax) { ymin = 0; ymax = 1; }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double px = (W - L - R) / (xmax - xmin), py = (H - T - B) / (ymax - ymin);
    auto X = [&](double v) { return L + (v - xmin) * px; };
    auto Y = [&](double v) { return H - B - (v - ymin) * py; };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15' font-family='sans-serif'>"
       << title << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        os << "<line x1='" << X(xv) << "' y1='" << T << "' x2='" << X(xv) << "' y2='" << H - B
           << "' stroke='#ddd'/>\n";
        os << "<line x1='" << L << "' y1='" << Y(yv) << "' x2='" << W - R << "' y2='" << Y(yv)
           << "' stroke='#ddd'/>\n";
        char lbl[32];
        std::snprintf(lbl, sizeof lbl, "%.3g", xv);
        os << "<text x='" << X(xv) << "' y='" << H - B + 18
           << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << lbl << "</text>\n";
        std::snprintf(lbl, sizeof lbl, "%.3g", yv);
        os << "<text x='" << L - 6 << "' y='" << Y(yv) + 4
           << "' text-anchor='end' font-size='11' font-family='sans-serif'>" << lbl << "</text>\n";
    }
    os << "<rect x='" << L << "' y='" << T << "' width='" << W - L - R << "' height='" << H - T - B
       << "' fill='none' stroke='#444'/>\n";
    os << "<text x='" << W / 2 << "' y='" << H - 14
       << "' text-anchor='middle' font-size='13' font-family='sans-serif'>" << xlabel << "</text>\n";
    os << "<text x='18' y='" << H / 2
       << "' text-anchor='middle' font-size='13' font-family='sans-serif' transform='rotate(-90 18 "
       << H / 2 << ")'>" << ylabel << "</text>\n";
    for (size_t s = 0; s < series.size(); ++s) {
        const char* col = colors[s % 6];
        os << "<polyline fill='none' stroke='" << col << "' stroke-width='1.8' points='";
        for (size_t i = 0; i < series[s].x.size(); ++i)
            os << X(series[s].x[i]) << "," << Y(series[s].y[i]) << " ";
        os << "'/>\n";
        os << "<text x='" << W - R - 8 << "' y='" << T + 18 + 16 * double(s)
           << "' text-anchor='end' font-size='12' font-family='sans-serif' fill='" << col << "'>"
           << series[s].label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, std::string out_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (cfg.out_dir.empty()) throw UsageError("no output directory (set [output] dir or --out)");
    fs::create_directories(cfg.out_dir);

    TrainResult res = train(cfg.train, &std::cout);

    {
        std::ostringstream os;
        write_trainlog(res.log, os);
        write_file(fs::path(cfg.out_dir) / "trainlog.csv", os.str());
    }
    TrainingExtras ex = training_extras(res);
    save_checkpoint(res.net, (fs::path(cfg.out_dir) / "final.ckpt").string(), &ex);
    {
        std::ostringstream os;
        write_lipschitz_csv(res.report, os);
        write_file(fs::path(cfg.out_dir) / "lipschitz.csv", os.str());
    }
    {
        RunConfig resolved = cfg;
        write_file(fs::path(cfg.out_dir) / "config_resolved.cfg", serialize_config(resolved));
    }

    double wall = 0.0;
    for (double w : res.epoch_wall) wall += w;
    const char* status = res.status == TrainStatus::Ok          ? "ok"
                         : res.status == TrainStatus::PowerStall ? "power_stall"
                                                                 : "diverged";
    std::cout << "status=" << status << "\n"
              << "epochs=" << res.completed_epochs << "\n";
    if (!res.log.empty()) {
        std::cout << "final_loss=" << g17(res.log.back().loss) << "\n"
                  << "final_clean_acc=" << g17(res.log.back().clean_acc) << "\n"
                  << "final_vra=" << g17(res.log.back().vra) << "\n"
                  << "k_sub=" << g17(res.log.back().k_sub) << "\n";
    }
    std::cout << "wall_s=" << g17(wall) << "\n"
              << "out_dir=" << cfg.out_dir << "\n";
    return res.status == TrainStatus::Ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

struct CertifyArtifacts {
    Dataset test;
    LipschitzReport rep;
    std::vector<CertResult> certs;
};

CertifyArtifacts run_certificates(const Network& net, const TrainingExtras& extras,
                                  const RunConfig& cfg, double eps, double k_scale) {
    CertifyArtifacts art;
    Dataset full = cfg.train.data.materialize();
    auto split = split_80_20(full);
    art.test = std::move(split.second);

    NetPowerState power = power_from_extras(extras);
    PowerOpts opts;
    opts.safety = cfg.train.safety;
    art.rep = lipschitz_report(net, BoundMode::Certify, power, opts);
    if (k_scale != 1.0) scale_margin(art.rep, k_scale);
    art.certs = certified_predict(net, art.test.inputs, eps, art.rep);
    return art;
}

void write_cert_csv(const CertifyArtifacts& art, std::ostream& os) {
    os << "index,label,predicted,correct,certified,f_top,f_bot\n";
    char buf[256];
    for (size_t n = 0; n < art.certs.size(); ++n) {
        const CertResult& c = art.certs[n];
        std::snprintf(buf, sizeof buf, "%zu,%d,%d,%d,%d,%.17g,%.17g\n", n, art.test.labels[n],
                      c.predicted, int(c.predicted == art.test.labels[n]), int(c.certified),
                      c.f_top, c.f_bot);
        os << buf;
    }
}

int cmd_certify(const std::string& ckpt_path, const std::string& config_path, double eps,
                double k_scale, const std::string& out_csv) {
    RunConfig cfg = load_run_config(config_path);
    LoadedCheckpoint ck = load_ckpt(ckpt_path);
    require_matching_arch(ck.net, cfg);
    if (eps <= 0) eps = cfg.train.eps;

    CertifyArtifacts art = run_certificates(ck.net, ck.extras, cfg, eps, k_scale);
    if (!out_csv.empty()) {
        std::ostringstream os;
        write_cert_csv(art, os);
        write_file(out_csv, os.str());
    }
    std::cout << "n=" << art.certs.size() << "\n"
              << "eps=" << g17(eps) << "\n"
              << "k_scale=" << g17(k_scale) << "\n"
              << "k_sub=" << g17(art.rep.k_sub) << "\n"
              << "clean_acc=" << g17(clean_accuracy(art.certs, art.test.labels)) << "\n"
              << "vra=" << g17(vra(art.certs, art.test.labels)) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

int cmd_attack(const std::string& ckpt_path, const std::string& config_path, double eps,
               double k_scale, bool only_certified, size_t steps, size_t restarts,
               const std::string& out_csv) {
    RunConfig cfg = load_run_config(config_path);
    LoadedCheckpoint ck = load_ckpt(ckpt_path);
    require_matching_arch(ck.net, cfg);
    if (eps <= 0) eps = cfg.train.eps;

    CertifyArtifacts art = run_certificates(ck.net, ck.extras, cfg, eps, k_scale);
    const size_t N = art.certs.size();

    std::vector<size_t> targets;
    for (size_t n = 0; n < N; ++n)
        if (!only_certified || art.certs[n].certified) targets.push_back(n);

    Shape in = ck.net.input_shape();
    Tensor X({targets.size(), in[0], in[1], in[2]});
    std::vector<int> preds(targets.size());
    const size_t d = in[0] * in[1] * in[2];
    for (size_t i = 0; i < targets.size(); ++i) {
        const size_t n = targets[i];
        std::copy(art.test.inputs.ptr() + n * d, art.test.inputs.ptr() + (n + 1) * d, X.ptr() + i * d);
        preds[i] = int(art.certs[n].predicted);
    }
    PgdOpts popts;
    popts.steps = steps;
    popts.restarts = restarts;
    auto outs = targets.empty() ? std::vector<AttackOutcome>{} : pgd_attack(ck.net, X, preds, eps, popts);

    size_t flips = 0, violations = 0;
    std::ostringstream os;
    os << "index,label,predicted,certified,attacked,flipped,final_margin,delta_norm\n";
    char buf[256];
    std::vector<bool> attacked(N, false), flipped(N, false);
    std::vector<double> fmarg(N, 0.0), dnorm(N, 0.0);
    for (size_t i = 0; i < targets.size(); ++i) {
        const size_t n = targets[i];
        attacked[n] = true;
        flipped[n] = outs[i].success;
        fmarg[n] = outs[i].final_margin;
        double s = 0;
        for (double v : outs[i].delta.data) s += v * v;
        dnorm[n] = std::sqrt(s);
        if (outs[i].success) {
            ++flips;
            if (art.certs[n].certified) {
                ++violations;
                std::cout << "ALARM: certified point " << n << " flipped by an attack inside the ball"
                          << " (delta_norm=" << g17(dnorm[n]) << ", eps=" << g17(eps) << ")\n";
            }
        }
    }
    for (size_t n = 0; n < N; ++n) {
        std::snprintf(buf, sizeof buf, "%zu,%d,%d,%d,%d,%d,%.17g,%.17g\n", n, art.test.labels[n],
                      art.certs[n].predicted, int(art.certs[n].certified), int(attacked[n]),
                      int(flipped[n]), fmarg[n], dnorm[n]);
        os << buf;
    }
    if (!out_csv.empty()) write_file(out_csv, os.str());

    std::cout << "n=" << N << "\n"
              << "eps=" << g17(eps) << "\n"
              << "k_scale=" << g17(k_scale) << "\n"
              << "attacked=" << targets.size() << "\n"
              << "flips=" << flips << "\n"
              << "violations=" << violations << "\n";
    return violations > 0 ? 3 : 0;
}

// ---------------------------------------------------------------------------
// lipschitz
// ---------------------------------------------------------------------------

int cmd_lipschitz(const std::string& ckpt_path, bool compare_oracle, const std::string& out_csv) {
    LoadedCheckpoint ck = load_ckpt(ckpt_path);
    const Network& net = ck.net;
    NetPowerState power = power_from_extras(ck.extras);
    PowerOpts opts;
    LipschitzReport rep = lipschitz_report(net, BoundMode::Certify, power, opts);

    std::ostringstream os;
    os << "layer,method,k,residual,iterations";
    if (compare_oracle) os << ",exact,ratio";
    os << "\n";
    auto emit = [&](const LayerBound& lb, size_t layer_index) {
        os << lb.layer << "," << lb.method << "," << g17(lb.k) << "," << g17(lb.residual) << ","
           << lb.iterations;
        if (compare_oracle) {
            double exact = -1.0;
            const Layer& l = net.layers[layer_index];
            switch (l.kind) {
                case LayerKind::Stem:
                case LayerKind::ConvBlock:
                case LayerKind::NeckConv: {
                    const size_t in_dim = l.in_shape[0] * l.in_shape[1] * l.in_shape[2];
                    if (in_dim <= 16384) {
                        Tensor M = materialize_conv_operator(net.param(l.name + ".w"), l.in_shape,
                                                             l.stride, l.padding);
                        exact = exact_spectral_norm(M);
                    }
                    break;
                }
                case LayerKind::LinearResidualBlock: {
                    const size_t in_dim = l.in_shape[0] * l.in_shape[1] * l.in_shape[2];
                    if (in_dim <= 16384) {
                        Tensor eq = equivalent_kernel(net.param(l.name + ".w"),
                                                      net.param(l.name + ".beta"), l.depth_scale);
                        Tensor M = materialize_conv_operator(eq, l.in_shape, l.stride, l.padding);
                        exact = exact_spectral_norm(M);
                    }
                    break;
                }
                case LayerKind::NeckDense:
                case LayerKind::DenseHead:
                    exact = exact_spectral_norm(net.param(l.name + ".w"));
                    break;
                default: exact = 1.0; break;
            }
            if (exact >= 0)
                os << "," << g17(exact) << "," << g17(lb.k / (exact > 0 ? exact : 1.0));
            else
                os << ",,";
        }
        os << "\n";
    };
    size_t li = 0;
    for (const auto& lb : rep.layers) {
        while (li < net.layers.size() && net.layers[li].name != lb.layer) ++li;
        emit(lb, li < net.layers.size() ? li : 0);
    }
    emit(rep.head, net.layers.size() - 1);

    std::cout << os.str();
    std::cout << "k_sub=" << g17(rep.k_sub) << "\n"
              << "head_k=" << g17(rep.head.k) << "\n"
              << "whole_map_k=" << g17(rep.k_sub * rep.head.k) << "\n";
    if (!out_csv.empty()) write_file(out_csv, os.str());
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunLog {
    std::string name;
    size_t blocks = 0;
    std::vector<TrainLogRow> rows;
};

RunLog read_run(const fs::path& dir) {
    RunLog r;
    r.name = dir.filename().string();
    std::ifstream cfgf(dir / "config_resolved.cfg");
    if (cfgf) {
        std::stringstream ss;
        ss << cfgf.rdbuf();
        try {
            r.blocks = parse_config(ss.str()).train.arch.blocks;
        } catch (const std::exception&) {
        }
    }
    std::ifstream is(dir / "trainlog.csv");
    if (!is) throw UsageError("no trainlog.csv in '" + dir.string() + "'");
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        TrainLogRow row;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf,%lf", &row.epoch, &row.eps_train,
                        &row.loss, &row.clean_acc, &row.vra, &row.churn, &row.k_sub) != 7)
            throw UsageError("malformed trainlog row in '" + (dir / "trainlog.csv").string() + "'");
        r.rows.push_back(row);
    }
    if (r.rows.empty()) throw UsageError("empty trainlog in '" + dir.string() + "'");
    return r;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw UsageError("report needs at least one run directory");
    fs::create_directories(out_dir);
    std::vector<RunLog> runs;
    for (const auto& d : run_dirs) runs.push_back(read_run(d));

    {
        std::ostringstream os;
        os << "run,blocks,final_vra,final_clean_acc,final_k_sub\n";
        for (const auto& r : runs)
            os << r.name << "," << r.blocks << "," << g17(r.rows.back().vra) << ","
               << g17(r.rows.back().clean_acc) << "," << g17(r.rows.back().k_sub) << "\n";
        write_file(fs::path(out_dir) / "depth_vra.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "run,epoch,churn,vra\n";
        for (const auto& r : runs)
            for (const auto& row : r.rows)
                os << r.name << "," << row.epoch << "," << g17(row.churn) << "," << g17(row.vra)
                   << "\n";
        write_file(fs::path(out_dir) / "epoch_churn.csv", os.str());
    }
    {
        Series depth;
        depth.label = "final VRA";
        std::vector<std::pair<double, double>> pts;
        for (const auto& r : runs) pts.emplace_back(double(r.blocks), r.rows.back().vra);
        std::sort(pts.begin(), pts.end());
        for (auto& [x, y] : pts) {
            depth.x.push_back(x);
            depth.y.push_back(y);
        }
        write_file(fs::path(out_dir) / "depth_vra.svg",
                   svg_line_plot({depth}, "residual blocks", "verified robust accuracy",
                                 "Depth versus verified accuracy"));
    }
    {
        std::vector<Series> cs;
        for (const auto& r : runs) {
            Series s;
            s.label = r.name;
            for (const auto& row : r.rows) {
                s.x.push_back(double(row.epoch));
                s.y.push_back(row.churn);
            }
            cs.push_back(std::move(s));
        }
        write_file(fs::path(out_dir) / "epoch_churn.svg",
                   svg_line_plot(cs, "epoch", "threat churn", "Threatening class churn by epoch"));
    }
    std::cout << "runs=" << runs.size() << "\n"
              << "out_dir=" << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Train and certify Lipschitz-margin networks.\n"
        "Workers: set CERTLIP_THREADS (default 1; keep 1 for bit-identical runs)."};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, out_dir, out_csv;
    double eps = 0.0, k_scale = 1.0;
    bool only_certified = false, compare_oracle = false;
    size_t steps = 200, restarts = 5;
    std::vector<std::string> run_dirs;

    auto* t = app.add_subcommand("train", "train a model from a config file");
    t->add_option("--config", config_path, "run configuration file")->required();
    t->add_option("--out", out_dir, "output directory (overrides [output] dir)");

    auto* c = app.add_subcommand("certify", "emit per-point certificates for a checkpoint");
    c->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    c->add_option("--config", config_path, "run configuration file")->required();
    c->add_option("--eps", eps, "certification radius (default: config eps)");
    c->add_option("--k-scale", k_scale, "multiply certified bounds by this factor (fault injection)");
    c->add_option("--out", out_csv, "write per-point certificate CSV here");

    auto* a = app.add_subcommand("attack", "run a PGD attack and cross-check certificates");
    a->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    a->add_option("--config", config_path, "run configuration file")->required();
    a->add_option("--eps", eps, "attack radius (default: config eps)");
    a->add_option("--k-scale", k_scale, "multiply certified bounds by this factor (fault injection)");
    a->add_option("--steps", steps, "PGD steps per restart");
    a->add_option("--restarts", restarts, "PGD restarts");
    a->add_flag("--only-certified", only_certified, "attack only points with a certificate");
    a->add_option("--out", out_csv, "write per-point attack CSV here");

    auto* l = app.add_subcommand("lipschitz", "print per-layer Lipschitz bounds for a checkpoint");
    l->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    l->add_flag("--compare-oracle", compare_oracle,
                "also compute exact spectral norms of materialized operators");
    l->add_option("--out", out_csv, "write the table as CSV here");

    auto* r = app.add_subcommand("report", "combine run directories into CSV summaries and SVG plots");
    r->add_option("runs", run_dirs, "run directories (each holding trainlog.csv)")->required();
    r->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (t->parsed()) return cmd_train(config_path, out_dir);
        if (c->parsed()) return cmd_certify(ckpt_path, config_path, eps, k_scale, out_csv);
        if (a->parsed())
            return cmd_attack(ckpt_path, config_path, eps, k_scale, only_certified, steps, restarts,
                              out_csv);
        if (l->parsed()) return cmd_lipschitz(ckpt_path, compare_oracle, out_csv);
        if (r->parsed()) return cmd_report(run_dirs, out_dir);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

// Acceptance run: one PASS/FAIL line per criterion. Heavy artifacts (denoiser,
// pretrained encoder, datasets, fine-tune results) are cached under the cache
// directory, keyed by the config that produced them.
//
//   acceptance [--cache DIR] [--cli PATH] [criterion ...]
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "cfgen/run.hpp"

using namespace cfgen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int p = 4) {
    std::ostringstream s;
    s << std::setprecision(p) << x;
    return s.str();
}

fs::path g_cache;
std::string g_cli;

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(1) << "\n";
}

// Wall-clock of stages that were actually computed (not reloaded).
void record_time(const std::string& stage, double s) {
    const auto p = g_cache / "timings.json";
    json t = fs::exists(p) ? read_json(p) : json::object();
    t[stage] = s;
    write_json(p, t);
}

std::optional<double> recorded_time(const std::string& stage) {
    const auto p = g_cache / "timings.json";
    if (!fs::exists(p)) return std::nullopt;
    const json t = read_json(p);
    if (!t.contains(stage)) return std::nullopt;
    return t[stage].get<double>();
}

json cached(const json& key, const std::function<json()>& compute) {
    const auto p = g_cache / "results" / (sha256_hex(key.dump()).substr(0, 24) + ".json");
    if (fs::exists(p)) {
        const json j = read_json(p);
        if (j.at("key") == key) return j.at("value");
    }
    json v = compute();
    write_json(p, json{{"key", key}, {"value", v}});
    return v;
}

// ---- 1: weight schedule ---------------------------------------------------------

Outcome c1() {
    const auto t0 = Clock::now();
    int bad = 0;
    DiffusionConfig d;
    for (int t = 0; t <= d.total_steps; ++t) {
        const auto w = guidance_weights(t, d);
        if (std::abs(w.local + w.global - d.w_max) > 1e-12) ++bad;
        if (t <= d.threshold_step && (w.local != d.w_max || w.global != 0.0)) ++bad;
    }
    const auto end = guidance_weights(d.total_steps, d);
    if (end.local != 0.0 || end.global != d.w_max) ++bad;
    DiffusionConfig big;
    big.total_steps = 1000;
    big.threshold_step = 500;
    for (int t = 0; t <= 1000; ++t) {
        const auto w = guidance_weights(t, big);
        if (std::abs(w.local + w.global - big.w_max) > 1e-12) ++bad;
    }
    const auto mid = guidance_weights(750, big);
    const bool mid_ok = std::abs(mid.local - 0.5) <= 1e-12 && std::abs(mid.global - 0.5) <= 1e-12;
    // Integer weights stay exact.
    DiffusionConfig ints;
    ints.w_max = 4.0;
    ints.total_steps = 8;
    ints.threshold_step = 4;
    for (int t = 0; t <= 8; ++t) {
        const auto w = guidance_weights(t, ints);
        if (w.local + w.global != 4.0 || w.local != std::round(w.local)) ++bad;
    }
    const double s = seconds_since(t0);
    return {bad == 0 && mid_ok && s < 1.0,
            "violations " + std::to_string(bad) + ", midpoint (" + fmt(mid.local) + ", " + fmt(mid.global) + "), " +
                fmt(s, 3) + " s"};
}

// ---- 2: mask locality -------------------------------------------------------------

using MD = MatT<double>;

MD rnd(int r, int c, Rng& rng, double s = 0.5) {
    MD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * s;
    return m;
}

Outcome c2() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    const int cells = 8, n = cells * cells, C = 4, E = 3, d = 5;
    SiteParams<double> p{rnd(C, d, rng), rnd(n, d, rng), rnd(E, d, rng), rnd(E, d, rng),
                         rnd(E, d, rng), rnd(E, d, rng), rnd(d, C, rng)};
    auto box = [&](int y0, int x0, int y1, int x1) {
        std::vector<double> m(static_cast<size_t>(n), 0.0);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) m[static_cast<size_t>(y * cells + x)] = 1.0;
        return m;
    };
    const MD h = rnd(n, C, rng, 1.0), global = rnd(3, E, rng, 1.0);
    std::vector<EntityTokens<double>> ents{{rnd(2, E, rng, 1.0), rnd(4, E, rng, 1.0), box(0, 0, 4, 3)},
                                           {rnd(3, E, rng, 1.0), rnd(4, E, rng, 1.0), box(3, 4, 8, 8)}};
    const GuidanceWeightsPair w{0.8, 0.2};
    GuidanceSite<double> site;
    site.forward(h, global, ents, p, w);
    long outside_nonzero = 0, outside_checked = 0, fd_bad = 0, fd_checked = 0;
    for (size_t i = 0; i < ents.size(); ++i)
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < C; ++c) {
                MD dout = MD::Zero(n, C);
                dout(r, c) = 1.0;
                const auto g = site.backward(dout, p);
                const bool inside = ents[i].mask[static_cast<size_t>(r)] != 0.0;
                for (int stream = 0; stream < 2; ++stream) {
                    const MD& an = stream == 0 ? g.text[i] : g.image[i];
                    const MD& tok = stream == 0 ? ents[i].text : ents[i].image;
                    for (Eigen::Index j = 0; j < tok.size(); ++j) {
                        const double step = 1e-4;
                        auto up = ents, dn = ents;
                        (stream == 0 ? up[i].text : up[i].image).data()[j] += step;
                        (stream == 0 ? dn[i].text : dn[i].image).data()[j] -= step;
                        GuidanceSite<double> s2;
                        const double fd = (s2.forward(h, global, up, p, w)(r, c) - s2.forward(h, global, dn, p, w)(r, c)) / (2 * step);
                        if (!inside) {
                            ++outside_checked;
                            if (an.data()[j] != 0.0 || fd != 0.0) ++outside_nonzero;
                        } else {
                            ++fd_checked;
                            const double a = an.data()[j];
                            if (std::abs(fd - a) > 1e-3 * std::max(std::abs(a), 1e-3)) ++fd_bad;
                        }
                    }
                }
            }
    const double s = seconds_since(t0);
    return {outside_nonzero == 0 && fd_bad == 0 && outside_checked > 0 && s < 60,
            "outside-mask nonzero " + std::to_string(outside_nonzero) + "/" + std::to_string(outside_checked) +
                ", inside FD mismatches " + std::to_string(fd_bad) + "/" + std::to_string(fd_checked) + ", " + fmt(s, 3) + " s"};
}

// ---- 3: attention oracle ------------------------------------------------------------

Outcome c3() {
    const auto t0 = Clock::now();
    Rng rng(33);
    double worst = 0;
    for (int inst = 0; inst < 50; ++inst) {
        const int n = 1 + static_cast<int>(rng.below(8)), d = 1 + static_cast<int>(rng.below(8));
        const int nt = static_cast<int>(rng.below(4)), ni = 1 + static_cast<int>(rng.below(5)), dv = 1 + static_cast<int>(rng.below(6));
        const MD q = rnd(n, d, rng, 1.0), kt = rnd(nt, d, rng, 1.0), vt = rnd(nt, dv, rng, 1.0), ki = rnd(ni, d, rng, 1.0),
                 vi = rnd(ni, dv, rng, 1.0);
        const MD got = local_cross_attention<double>(q, kt, vt, ki, vi);
        // Brute force over the concatenated key/value list.
        for (int r = 0; r < n; ++r) {
            std::vector<double> logits;
            std::vector<const double*> vals;
            auto add = [&](const MD& k, const MD& v) {
                for (Eigen::Index j = 0; j < k.rows(); ++j) {
                    double dot = 0;
                    for (int c = 0; c < d; ++c) dot += q(r, c) * k(j, c);
                    logits.push_back(dot / std::sqrt(static_cast<double>(d)));
                    vals.push_back(&v(j, 0));
                }
            };
            add(kt, vt);
            add(ki, vi);
            double z = 0;
            for (double l : logits) z += std::exp(l);
            for (int c = 0; c < dv; ++c) {
                double o = 0;
                for (size_t j = 0; j < logits.size(); ++j) o += std::exp(logits[j]) / z * vals[j][c];
                worst = std::max(worst, std::abs(o - got(r, c)));
            }
        }
    }
    const double s = seconds_since(t0);
    return {worst <= 1e-6 && s < 60, "max abs error " + fmt(worst) + " over 50 instances, " + fmt(s, 3) + " s"};
}

// ---- 4 / 5: losses ---------------------------------------------------------------------

using LD = long double;

MatD rsim(int r, int c, Rng& rng) {
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::tanh(rng.normal());
    return m;
}

MatD rlabels(int m, Rng& rng) {
    MatD l(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) l(i, j) = (i == j || rng.uniform() < 0.2) ? 1.0 : -1.0;
    return l;
}

LD sp(LD x) { return std::log1p(std::exp(x)); }

LD o_cont(const MatD& S, LD tau) {
    LD t = 0;
    for (int i = 0; i < S.rows(); ++i) {
        LD den = 0;
        for (int j = 0; j < S.cols(); ++j) den += std::exp(S(i, j) / tau);
        t += -S(i, i) / tau + std::log(den);
    }
    return t;
}
LD o_intra(const MatD& S, const MatD& l, LD sc, LD b) {
    LD t = 0;
    for (int i = 0; i < S.rows(); ++i)
        for (int j = 0; j < S.cols(); ++j) t += sp(l(i, j) * (-sc * S(i, j) + b));
    return t;
}
LD o_inter(const MatD& R, LD sc, LD b) {
    LD t = 0;
    for (int i = 0; i < R.rows(); ++i)
        for (int j = 0; j < R.cols(); ++j)
            if (i != j) t += sp(sc * R(i, j) - b);
    return t;
}
LD o_neg(const std::vector<double>& p, const std::vector<double>& q, LD tau) {
    LD t = 0;
    for (size_t i = 0; i < p.size(); ++i) t += sp((q[i] - p[i]) / tau);
    return t;
}

Outcome c4() {
    const auto t0 = Clock::now();
    Rng rng(44);
    double worst = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const double tau = rng.uniform(0.05, 1.5), sc = rng.uniform(0.5, 12), b = rng.uniform(-4, 4);
        const int B = 1 + static_cast<int>(rng.below(6)), m = 1 + static_cast<int>(rng.below(6)), n = 2 + static_cast<int>(rng.below(4));
        const MatD S = rsim(B, B, rng), Si = rsim(m, m, rng), l = rlabels(m, rng), R = rsim(n, n, rng);
        std::vector<double> p(7), q(7);
        for (int i = 0; i < 7; ++i) p[i] = std::tanh(rng.normal()), q[i] = std::tanh(rng.normal());
        worst = std::max(worst, std::abs(contrastive_loss(S, tau).value - static_cast<double>(o_cont(S, tau))));
        worst = std::max(worst, std::abs(intra_set_loss(Si, l, sc, b).value - static_cast<double>(o_intra(Si, l, sc, b))));
        worst = std::max(worst, std::abs(inter_set_loss(R, sc, b).value - static_cast<double>(o_inter(R, sc, b))));
        worst = std::max(worst, std::abs(neg_text_loss(p, q, tau).value - static_cast<double>(o_neg(p, q, tau))));
        SetBatch batch;
        LD want = 0;
        for (int i = 0; i < n; ++i) {
            batch.set_sims.push_back(rsim(m, m, rng));
            batch.labels.push_back(rlabels(m, rng));
            want += o_intra(batch.set_sims.back(), batch.labels.back(), sc, b);
        }
        batch.rep_sims = rsim(n, n, rng);
        want += o_inter(batch.rep_sims, sc, b);
        worst = std::max(worst, std::abs(sets_loss(batch, sc, b).value - static_cast<double>(want)));
        LossParams lp;
        lp.log_scale = std::log(sc);
        lp.bias = b;
        lp.log_temperature = std::log(tau);
        worst = std::max(worst, std::abs(total_loss(batch, NegTextBatch{p, q}, lp).value - static_cast<double>(want + o_neg(p, q, tau))));
    }
    const double a5 = intra_set_loss(MatD::Zero(1, 1), MatD::Ones(1, 1), 1.0, 0.0).value;
    const double a6 = inter_set_loss(MatD::Zero(2, 2), 1.0, 0.0).value;
    const bool anchors = std::abs(a5 - std::log(2.0)) <= 1e-6 && std::abs(a6 - 2 * std::log(2.0)) <= 1e-6;
    const double s = seconds_since(t0);
    return {worst <= 1e-6 && anchors && s < 60,
            "max abs error " + fmt(worst) + ", anchors " + fmt(a5, 8) + " / " + fmt(a6, 8) + ", " + fmt(s, 3) + " s"};
}

Outcome c5() {
    const auto t0 = Clock::now();
    Rng rng(55);
    const double h = 1e-5;
    double worst = 0;
    auto rel = [](double fd, double an) { return std::abs(fd - an) / std::max(std::abs(an), 1e-2); };
    auto fd_mat = [&](const MatD& X, const MatD& grad, const std::function<double(const MatD&)>& f) {
        for (Eigen::Index i = 0; i < X.size(); ++i) {
            MatD up = X, dn = X;
            up.data()[i] += h;
            dn.data()[i] -= h;
            worst = std::max(worst, rel((f(up) - f(dn)) / (2 * h), grad.data()[i]));
        }
    };
    auto fd_scalar = [&](double x, double an, const std::function<double(double)>& f) {
        worst = std::max(worst, rel((f(x + h) - f(x - h)) / (2 * h), an));
    };
    for (int inst = 0; inst < 20; ++inst) {
        const double tau = rng.uniform(0.2, 1.5), sc = rng.uniform(0.5, 5), b = rng.uniform(-2, 2);
        const MatD S = rsim(4, 4, rng), Si = rsim(5, 5, rng), l = rlabels(5, rng), R = rsim(4, 4, rng);
        LossGrad g;
        contrastive_loss(S, tau, &g);
        fd_mat(S, g.d_sim, [&](const MatD& x) { return contrastive_loss(x, tau).value; });
        fd_scalar(tau, g.d_temperature, [&](double x) { return contrastive_loss(S, x).value; });
        LossGrad gi;
        intra_set_loss(Si, l, sc, b, &gi);
        fd_mat(Si, gi.d_sets[0], [&](const MatD& x) { return intra_set_loss(x, l, sc, b).value; });
        fd_scalar(sc, gi.d_scale, [&](double x) { return intra_set_loss(Si, l, x, b).value; });
        fd_scalar(b, gi.d_bias, [&](double x) { return intra_set_loss(Si, l, sc, x).value; });
        LossGrad gr;
        inter_set_loss(R, sc, b, &gr);
        fd_mat(R, gr.d_sim, [&](const MatD& x) { return inter_set_loss(x, sc, b).value; });
        fd_scalar(sc, gr.d_scale, [&](double x) { return inter_set_loss(R, x, b).value; });
        fd_scalar(b, gr.d_bias, [&](double x) { return inter_set_loss(R, sc, x).value; });
        std::vector<double> p(5), q(5);
        for (int i = 0; i < 5; ++i) p[i] = std::tanh(rng.normal()), q[i] = std::tanh(rng.normal());
        LossGrad gn;
        neg_text_loss(p, q, tau, &gn);
        for (int i = 0; i < 5; ++i) {
            auto pu = p, pd = p, qu = q, qd = q;
            pu[i] += h, pd[i] -= h, qu[i] += h, qd[i] -= h;
            worst = std::max(worst, rel((neg_text_loss(pu, q, tau).value - neg_text_loss(pd, q, tau).value) / (2 * h), gn.d_pos[i]));
            worst = std::max(worst, rel((neg_text_loss(p, qu, tau).value - neg_text_loss(p, qd, tau).value) / (2 * h), gn.d_neg[i]));
        }
        fd_scalar(tau, gn.d_temperature, [&](double x) { return neg_text_loss(p, q, x).value; });
        // Eq. 7 / Eq. 9 composites.
        SetBatch batch;
        for (int i = 0; i < 3; ++i) {
            batch.set_sims.push_back(rsim(4, 4, rng));
            batch.labels.push_back(rlabels(4, rng));
        }
        batch.rep_sims = rsim(3, 3, rng);
        LossGrad gs;
        sets_loss(batch, sc, b, &gs);
        for (int i = 0; i < 3; ++i)
            fd_mat(batch.set_sims[static_cast<size_t>(i)], gs.d_sets[static_cast<size_t>(i)], [&](const MatD& x) {
                SetBatch c = batch;
                c.set_sims[static_cast<size_t>(i)] = x;
                return sets_loss(c, sc, b).value;
            });
        fd_mat(batch.rep_sims, gs.d_sim, [&](const MatD& x) {
            SetBatch c = batch;
            c.rep_sims = x;
            return sets_loss(c, sc, b).value;
        });
        auto total = [&](double s2, double b2, double t2) {
            LossParams lp;
            lp.log_scale = std::log(s2);
            lp.bias = b2;
            lp.log_temperature = std::log(t2);
            return total_loss(batch, NegTextBatch{p, q}, lp).value;
        };
        LossParams lp;
        lp.log_scale = std::log(sc);
        lp.bias = b;
        lp.log_temperature = std::log(tau);
        LossGrad gt;
        total_loss(batch, NegTextBatch{p, q}, lp, &gt);
        fd_scalar(sc, gt.d_scale, [&](double x) { return total(x, b, tau); });
        fd_scalar(b, gt.d_bias, [&](double x) { return total(sc, x, tau); });
        fd_scalar(tau, gt.d_temperature, [&](double x) { return total(sc, b, x); });
    }
    const double s = seconds_since(t0);
    return {worst <= 1e-4 && s < 120, "max relative error " + fmt(worst) + " over 20 instances each, " + fmt(s, 3) + " s"};
}

// ---- 6: efficiency structure ---------------------------------------------------------

Outcome c6() {
    const auto t0 = Clock::now();
    const auto g = GrammarConfig::defaults();
    GrammarConfig g3 = g;
    g3.min_entities = g3.max_entities = 3;
    SetBuildConfig sc;
    sc.m = 10;
    auto imager = [&](const SceneSpec& s, Provenance, uint64_t) { return compose_collage(s, g).image; };
    std::vector<CounterfactualSet> sets;
    for (int i = 0; i < 4; ++i) sets.push_back(build_set(generate_scene(60 + i, g3), i, sc, 600 + i, g, imager));
    EncoderConfig ec;
    ec.embed = ec.text_width = 16;
    ec.text_layers = 1;
    FinetuneConfig fc;
    fc.epochs = 1;
    fc.batch_sets = 4;
    fc.loss = {true, false};
    DualEncoder a(g, ec, 1), b(g, ec, 1);
    const auto la = finetune(a, sets, fc);
    fc.loss = {false, false};
    const auto lb = finetune(b, sets, fc);
    const long long sets_count = la.steps.at(0).at("similarity_eval_count");
    const long long all_pairs = lb.steps.at(0).at("similarity_eval_count");
    const double ratio = static_cast<double>(sets_count) / static_cast<double>(all_pairs);
    const double s = seconds_since(t0);
    const bool ok = la.steps.size() == 1 && sets_count == 4 * 100 + 4 * 3 && all_pairs == 1600 && ratio < 0.26 && s < 1.0;
    return {ok, "measured " + std::to_string(sets_count) + " vs all-pairs " + std::to_string(all_pairs) + ", ratio " +
                    fmt(ratio, 6) + ", " + fmt(s, 3) + " s"};
}

// ---- shared heavy setup -----------------------------------------------------------

RunConfig base_config() {
    RunConfig cfg;
    cfg.experiment = "acceptance";
    cfg.out = g_cache.string();
    return cfg;
}

Denoiser& denoiser() {
    static std::optional<Denoiser> d;
    if (!d) {
        const auto cfg = base_config();
        const auto t0 = Clock::now();
        d.emplace(obtain_denoiser(cfg, cfg.denoiser_path(), [](const json& l) { std::cerr << "  denoiser " << l.dump() << "\n"; }));
        if (const double s = seconds_since(t0); s > 5) record_time("denoiser_training", s);
    }
    return *d;
}

std::string denoiser_hash() {
    denoiser();
    static const std::string h = sha256_file(base_config().denoiser_path());
    return h;
}

DualEncoder& start_encoder() {
    static std::optional<DualEncoder> e;
    if (!e) {
        const auto t0 = Clock::now();
        e.emplace(obtain_start_encoder(base_config(), (g_cache / "pretrained.ckpt").string()));
        if (const double s = seconds_since(t0); s > 5) record_time("pretraining", s);
    }
    return *e;
}

const Dataset& dataset(int m) {
    static std::map<int, Dataset> sets;
    if (!sets.count(m)) {
        auto cfg = base_config();
        DatasetConfig dc = cfg.dataset;
        dc.n_sets = 200;
        dc.m = m;
        const auto t0 = Clock::now();
        sets[m] = obtain_dataset(cfg, dc, (g_cache / ("dataset_m" + std::to_string(m))).string(), &denoiser(), denoiser_hash(),
                                 &start_encoder());
        if (const double s = seconds_since(t0); s > 5) record_time("dataset_m" + std::to_string(m), s);
    }
    return sets.at(m);
}

const Benchmark& benchmark() {
    static std::optional<Benchmark> b;
    if (!b) {
        const auto cfg = base_config();
        std::vector<uint64_t> seeds = pretrain_scene_seeds(cfg.pretrain);
        for (uint64_t i = 0; i < static_cast<uint64_t>(cfg.diffusion_train.n_scenes); ++i)
            seeds.push_back(cfg.diffusion_train.scene_seed_offset + i);
        for (int m : {5, 10, 20}) {
            const auto s = manifest_scene_seeds(dataset(m).manifest);
            seeds.insert(seeds.end(), s.begin(), s.end());
        }
        b.emplace(obtain_benchmark(cfg, seeds));
    }
    return *b;
}

struct RunResult {
    EvalResult eval;
    double probe = 0;
    double seconds = 0;
};

RunResult finetune_run(int m, LossConfig loss, uint64_t seed) {
    FinetuneConfig fc = base_config().finetune;
    fc.loss = loss;
    fc.seed = seed;
    const auto& ds = dataset(m);
    const json key{{"stage", "finetune"}, {"finetune", fc}, {"dataset", manifest_hash(ds.manifest)},
                   {"start", start_encoder().params().checksum()}, {"benchmark", base_config().benchmark}, {"version", std::string(kVersion)}};
    const json v = cached(key, [&] {
        const auto t0 = Clock::now();
        DualEncoder enc = start_encoder().clone();
        finetune(enc, ds.sets, fc);
        const double train_s = seconds_since(t0);
        const auto r = evaluate(enc, benchmark());
        return json{{"eval", r}, {"probe", linear_probe_accuracy(enc)}, {"seconds", train_s}};
    });
    std::cerr << "  finetune m=" << m << " " << loss.name() << " seed " << seed << " done\n";
    return {eval_result_from_json(v.at("eval")), v.at("probe"), v.at("seconds")};
}

const std::vector<ItemKind> kBinary = {ItemKind::AttributeNegative, ItemKind::RelationNegative, ItemKind::OrderNegative};

// ---- 7: guidance ordering ----------------------------------------------------------------

Outcome c7() {
    auto& model = denoiser();
    GuidanceExperimentConfig gc;
    const json key{{"stage", "guidance"}, {"denoiser", denoiser_hash()}, {"n", gc.n_scenes}, {"seeds", gc.seeds},
                   {"offset", gc.scene_seed_offset}, {"k", gc.collage_init_steps}};
    const json v = cached(key, [&] {
        const auto t0 = Clock::now();
        const auto r = guidance_ordering(model, gc);
        json out = json::object();
        for (const auto& [mode, accs] : r) {
            json a = json::array();
            for (const auto& x : accs) a.push_back({{"attribute", x.attribute}, {"position", x.position}});
            out[std::string(to_string(mode))] = a;
        }
        return json{{"modes", out}, {"seconds", seconds_since(t0)}};
    });
    auto mean = [&](GuidanceMode mode, const char* dim) {
        double s = 0;
        const auto& a = v.at("modes").at(std::string(to_string(mode)));
        for (const auto& x : a) s += x.at(dim).get<double>();
        return 100.0 * s / static_cast<double>(a.size());
    };
    bool ok = true;
    std::ostringstream d;
    for (const char* dim : {"attribute", "position"}) {
        const double c = mean(GuidanceMode::Combined, dim), l = mean(GuidanceMode::LocalText, dim), g = mean(GuidanceMode::GlobalOnly, dim);
        ok = ok && c - l >= 3.0 && l - g >= 3.0;
        d << dim << " combined " << fmt(c) << " > local-text " << fmt(l) << " > global-only " << fmt(g) << "; ";
    }
    const double total = v.at("seconds").get<double>() + recorded_time("denoiser_training").value_or(0.0);
    ok = ok && total <= 8 * 3600;
    d << "3 seeds x " << gc.n_scenes << " scenes, " << fmt(total / 60, 3) << " min incl. training";
    return {ok, d.str()};
}

// ---- 8 / 9 / 10: fine-tuning ---------------------------------------------------------

double mean_acc(const std::vector<RunResult>& runs) {
    double s = 0;
    for (const auto& r : runs) s += r.eval.mean_binary_accuracy(kBinary);
    return s / static_cast<double>(runs.size());
}

double mean_gap(const std::vector<RunResult>& runs) {
    double s = 0;
    for (const auto& r : runs) s += r.eval.mean_gap();
    return s / static_cast<double>(runs.size());
}

std::vector<RunResult> runs(int m, LossConfig loss) {
    std::vector<RunResult> out;
    for (uint64_t seed : {0, 1, 2}) out.push_back(finetune_run(m, loss, seed));
    return out;
}

std::string per_kind(const std::vector<RunResult>& rs) {
    std::ostringstream d;
    for (auto k : kBinary) {
        double s = 0;
        for (const auto& r : rs) s += r.eval.accuracy.at(std::string(to_string(k)));
        d << to_string(k) << " " << fmt(100 * s / static_cast<double>(rs.size()), 3) << " ";
    }
    return d.str();
}

Outcome c8() {
    const auto t0 = Clock::now();
    const auto eq9 = runs(10, {true, true});
    const auto eq4 = runs(10, {false, false});
    const auto cfg = base_config();
    DualEncoder untrained(cfg.grammar, cfg.encoder, derive_seed(cfg.pretrain.seed, 0xe7c));
    const auto u = evaluate(untrained, benchmark());
    const auto pre = evaluate(start_encoder(), benchmark());
    const double a9 = 100 * mean_acc(eq9), a4 = 100 * mean_acc(eq4), au = 100 * u.mean_binary_accuracy(kBinary);
    const double ap = 100 * pre.mean_binary_accuracy(kBinary);
    const double g9 = mean_gap(eq9), g4 = mean_gap(eq4), gu = u.mean_gap(), gp = pre.mean_gap();
    double train_s = 0;
    for (const auto& r : eq9) train_s += r.seconds;
    for (const auto& r : eq4) train_s += r.seconds;
    const double build_s = recorded_time("dataset_m10").value_or(0.0);
    const bool ok = a9 - au >= 10 && a9 - a4 >= 3 && g9 > g4 && g9 > gu && train_s + build_s <= 3600;
    std::ostringstream d;
    d << "mean binary acc eq9 " << fmt(a9) << " vs untrained " << fmt(au) << " (+" << fmt(a9 - au, 3) << ") vs eq4 " << fmt(a4)
      << " (+" << fmt(a9 - a4, 3) << "); gap eq9 " << fmt(g9) << " eq4 " << fmt(g4) << " untrained " << fmt(gu)
      << "; [pre-fine-tune encoder acc " << fmt(ap) << ", gap " << fmt(gp) << "]; eq9 " << per_kind(eq9) << "| eq4 "
      << per_kind(eq4) << "; " << fmt((train_s + build_s) / 60, 3) << " min (" << fmt(seconds_since(t0), 3) << " s this run)";
    return {ok, d.str()};
}

Outcome c9() {
    const auto r5 = runs(5, {true, true});
    const auto r20 = runs(20, {true, true});
    const double a5 = 100 * mean_acc(r5), a20 = 100 * mean_acc(r20);
    return {a20 >= a5, "m=20 " + fmt(a20) + " vs m=5 " + fmt(a5) + " (3 seeds)"};
}

Outcome c10() {
    const auto t0 = Clock::now();
    const double before = 100 * linear_probe_accuracy(start_encoder());
    const auto eq9 = runs(10, {true, true});
    double after = 0;
    for (const auto& r : eq9) after += 100 * r.probe;
    after /= static_cast<double>(eq9.size());
    return {before - after <= 2.0, "probe accuracy " + fmt(before) + " -> " + fmt(after) + " (mean of 3 fine-tunes), " +
                                       fmt(seconds_since(t0), 3) + " s"};
}

// ---- 11: reproducibility -------------------------------------------------------------

std::string run_generate(const fs::path& out, const fs::path& config) {
    const fs::path log = out / "stdout.txt";
    fs::create_directories(out);
    const std::string cmd = "\"" + g_cli + "\" generate --config \"" + config.string() + "\" --out \"" + out.string() + "\" > \"" + log.string() + "\"";
    if (std::system(cmd.c_str()) != 0) fail(ErrorKind::State, "generate failed: " + cmd);
    std::ifstream in(log);
    std::string path, hash;
    in >> path >> hash;
    return hash;
}

Outcome c11() {
    const auto t0 = Clock::now();
    denoiser();
    start_encoder();
    const fs::path dir = g_cache / "repro";
    fs::remove_all(dir);
    fs::create_directories(dir);
    json cfg = json{{"experiment", "repro"},
                    {"dataset", {{"n_sets", 20}, {"m", 10}, {"seed", 11}, {"scene_seed_offset", 4'000'000'000ULL}}},
                    {"paths", {{"denoiser", base_config().denoiser_path()}, {"encoder", (g_cache / "pretrained.ckpt").string()}}}};
    write_json(dir / "config.json", cfg);
    const std::string h1 = run_generate(dir / "a", dir / "config.json");
    const std::string h2 = run_generate(dir / "b", dir / "config.json");
    const Dataset ds = load_dataset((dir / "a" / "dataset" / "manifest.json").string());
    std::vector<std::pair<const json*, const json*>> diffusion;  // (pair, set)
    for (const auto& s : ds.manifest.at("sets"))
        for (const auto& p : s.at("pairs"))
            if (p.at("provenance") == "diffusion_generated") diffusion.emplace_back(&p, &s);
    Rng rng(0x11);
    int same = 0, sampled = 0;
    const auto dc = dataset_config_from_json(ds.manifest.at("config").at("dataset"));
    for (int k = 0; k < 5 && !diffusion.empty(); ++k) {
        const json& p = *diffusion[rng.below(diffusion.size())].first;
        const Image img = generate_image(denoiser(), scene_from_json(p.at("scene")),
                                         guidance_mode_from_string(p.at("guidance").get<std::string>()), p.at("seed"),
                                         dc.collage_init_steps);
        same += image_hash(img) == p.at("image_hash").get<std::string>();
        ++sampled;
    }
    const double s = seconds_since(t0);
    const bool ok = !h1.empty() && h1 == h2 && sampled == 5 && same == 5 && s <= 1800;
    return {ok, "manifest hash " + h1.substr(0, 16) + (h1 == h2 ? " == " : " != ") + h2.substr(0, 16) + ", regenerated " +
                    std::to_string(same) + "/" + std::to_string(sampled) + " bit-identical, " + fmt(s, 3) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
    g_cache = CFGEN_ACCEPTANCE_CACHE;
    g_cli = CFGEN_CLI_PATH;
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--cache" && i + 1 < argc) g_cache = argv[++i];
        else if (a == "--cli" && i + 1 < argc) g_cli = argv[++i];
        else wanted.insert(std::stoi(a));
    }
    fs::create_directories(g_cache);
    const std::vector<std::pair<int, Outcome (*)()>> all = {{1, c1}, {2, c2}, {3, c3}, {4, c4},  {5, c5},  {6, c6},
                                                            {7, c7}, {8, c8}, {9, c9}, {10, c10}, {11, c11}};
    int failed = 0;
    json summary = json::object();
    for (const auto& [id, fn] : all) {
        if (!wanted.empty() && !wanted.count(id)) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
        summary[std::to_string(id)] = {{"pass", o.pass}, {"detail", o.detail}};
    }
    write_json(g_cache / "acceptance.json", summary);
    return failed == 0 ? 0 : 1;
}

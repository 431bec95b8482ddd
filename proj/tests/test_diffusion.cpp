#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>

#include "cfgen/diffusion.hpp"

using namespace cfgen;

namespace {

using MD = MatT<double>;

MD rndd(int r, int c, Rng& rng, double s = 1.0) {
    MD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * s;
    return m;
}

// Straight loops over the concatenated keys; no shared code with the library.
MD oracle_attention(const MD& q, const std::vector<const MD*>& ks, const std::vector<const MD*>& vs) {
    std::vector<std::vector<double>> keys, vals;
    for (const MD* k : ks)
        for (Eigen::Index r = 0; r < k->rows(); ++r) keys.emplace_back(k->row(r).data(), k->row(r).data() + k->cols());
    for (const MD* v : vs)
        for (Eigen::Index r = 0; r < v->rows(); ++r) {
            std::vector<double> row;
            for (Eigen::Index c = 0; c < v->cols(); ++c) row.push_back((*v)(r, c));
            vals.push_back(row);
        }
    const size_t dv = vals[0].size();
    MD out = MD::Zero(q.rows(), static_cast<Eigen::Index>(dv));
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        std::vector<double> s(keys.size());
        double mx = -1e300;
        for (size_t j = 0; j < keys.size(); ++j) {
            double dot = 0;
            for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(i, c) * keys[j][static_cast<size_t>(c)];
            s[j] = dot / std::sqrt(static_cast<double>(q.cols()));
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (size_t j = 0; j < keys.size(); ++j)
            for (size_t c = 0; c < dv; ++c) out(i, static_cast<Eigen::Index>(c)) += s[j] / z * vals[j][c];
    }
    return out;
}

SiteParams<double> random_site(int C, int E, int d, int n, Rng& rng) {
    return {rndd(C, d, rng, 0.4), rndd(n, d, rng, 0.4), rndd(E, d, rng, 0.4), rndd(E, d, rng, 0.4),
            rndd(E, d, rng, 0.4), rndd(E, d, rng, 0.4), rndd(d, C, rng, 0.4)};
}

std::vector<double> box_mask_cells(int y0, int x0, int y1, int x1, int cells) {
    std::vector<double> m(static_cast<size_t>(cells) * cells, 0.0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m[static_cast<size_t>(y) * cells + x] = 1.0;
    return m;
}

GrammarConfig small_grammar() {
    auto g = GrammarConfig::defaults();
    g.max_entities = 2;
    return g;
}

DiffusionConfig short_schedule() {
    DiffusionConfig c;
    c.total_steps = 20;
    c.threshold_step = 10;
    return c;
}

}  // namespace

TEST_CASE("guidance weights follow the schedule algebra") {
    DiffusionConfig c;
    for (int t = 0; t <= c.total_steps; ++t) {
        const auto w = guidance_weights(t, c);
        CHECK(w.local + w.global == c.w_max);
        CHECK(w.local >= 0.0);
        CHECK(w.global >= 0.0);
        if (t <= c.threshold_step) {
            CHECK(w.local == c.w_max);
            CHECK(w.global == 0.0);
        }
        if (t > 0) CHECK(w.local <= guidance_weights(t - 1, c).local);
    }
    CHECK(guidance_weights(c.total_steps, c).local == 0.0);
    CHECK(guidance_weights(c.total_steps, c).global == c.w_max);

    DiffusionConfig big;
    big.total_steps = 1000;
    big.threshold_step = 500;
    const auto mid = guidance_weights(750, big);
    CHECK(std::abs(mid.local - 0.5) <= 1e-12);
    CHECK(std::abs(mid.global - 0.5) <= 1e-12);

    CHECK_THROWS_AS(guidance_weights(-1, c), Error);
    CHECK_THROWS_AS(guidance_weights(c.total_steps + 1, c), Error);
}

TEST_CASE("diffusion config validation") {
    DiffusionConfig c;
    c.threshold_step = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.beta_start = 0.03;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.w_max = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    const auto parsed = diffusion_config_from_json(json{{"total_steps", 300}});
    CHECK(parsed.threshold_step == 150);
    CHECK_THROWS_AS(diffusion_config_from_json(json{{"steps", 3}}), Error);
}

TEST_CASE("local cross attention matches a brute-force oracle") {
    Rng rng(7);
    for (int inst = 0; inst < 50; ++inst) {
        const int n = 1 + static_cast<int>(rng.below(6)), d = 1 + static_cast<int>(rng.below(8));
        const int nt = 1 + static_cast<int>(rng.below(4)), ni = 1 + static_cast<int>(rng.below(5));
        const int dv = 1 + static_cast<int>(rng.below(6));
        const MD q = rndd(n, d, rng), kt = rndd(nt, d, rng), vt = rndd(nt, dv, rng), ki = rndd(ni, d, rng),
                 vi = rndd(ni, dv, rng);
        MD probs;
        const MD got = local_cross_attention<double>(q, kt, vt, ki, vi, &probs);
        const MD want = oracle_attention(q, {&kt, &ki}, {&vt, &vi});
        REQUIRE(got.rows() == n);
        REQUIRE(got.cols() == dv);
        CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-6);
        for (Eigen::Index r = 0; r < probs.rows(); ++r) CHECK(std::abs(probs.row(r).sum() - 1.0) <= 1e-6);
    }
}

TEST_CASE("attention edge cases") {
    Rng rng(8);
    const MD q = rndd(4, 3, rng), k = rndd(1, 3, rng), v = rndd(1, 5, rng);
    const MD empty(0, 3), empty_v(0, 5);
    const MD single = local_cross_attention<double>(q, k, v, empty, empty_v);
    for (Eigen::Index r = 0; r < 4; ++r) CHECK((single.row(r) - v.row(0)).cwiseAbs().maxCoeff() <= 1e-12);

    const MD kt = rndd(3, 3, rng), vt = rndd(3, 5, rng);
    // Duplicating a key-value pair is not a no-op in general; duplicating every
    // pair is, since each weight halves and renormalizes.
    MD kk(6, 3), vv(6, 5);
    kk << kt, kt;
    vv << vt, vt;
    CHECK((softmax_attention<double>(q, kk, vv) - softmax_attention<double>(q, kt, vt)).cwiseAbs().maxCoeff() <= 1e-12);

    CHECK_THROWS_AS(local_cross_attention<double>(q, rndd(2, 4, rng), rndd(2, 5, rng), empty, empty_v), Error);
    CHECK_THROWS_AS(local_cross_attention<double>(q, empty, empty_v, empty, empty_v), Error);
}

TEST_CASE("duplicated key-value pair matches the oracle weight split") {
    Rng rng(9);
    for (int inst = 0; inst < 20; ++inst) {
        const MD q = rndd(3, 4, rng), k = rndd(3, 4, rng), v = rndd(3, 2, rng);
        MD k2(4, 4), v2(4, 2);
        k2 << k, k.row(0);
        v2 << v, v.row(0);
        const MD want = oracle_attention(q, {&k2}, {&v2});
        CHECK((softmax_attention<double>(q, k2, v2) - want).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("guided update reduces to the global term when local weight is zero") {
    Rng rng(10);
    const int C = 5, E = 4, d = 6, cells = 8, n = cells * cells;
    const auto p = random_site(C, E, d, n, rng);
    const MD h = rndd(n, C, rng), global = rndd(3, E, rng);
    std::vector<EntityTokens<double>> ents{{rndd(2, E, rng), rndd(3, E, rng), box_mask_cells(1, 1, 5, 4, cells)}};
    GuidanceSite<double> site;
    const MD out = site.forward(h, global, ents, p, {0.0, 1.0});
    const MD q = h * p.wq + p.pq;
    const MD kg = global * p.wkg, vg = global * p.wvg;
    const MD want = h + oracle_attention(q, {&kg}, {&vg}) * p.wo;
    CHECK((out - want).cwiseAbs().maxCoeff() <= 1e-12);

    // Zero masks: local terms vanish for any weight.
    std::vector<EntityTokens<double>> zero{{rndd(2, E, rng), rndd(3, E, rng), std::vector<double>(n, 0.0)}};
    const MD z = site.forward(h, global, zero, p, {1.0, 0.0});
    CHECK((z - h).cwiseAbs().maxCoeff() <= 1e-12);

    // Outside every mask only the global term acts.
    const MD mixed = site.forward(h, global, ents, p, {0.4, 0.6});
    const MD g_only = h + 0.6 * oracle_attention(q, {&kg}, {&vg}) * p.wo;
    for (int r = 0; r < n; ++r)
        if (ents[0].mask[static_cast<size_t>(r)] == 0.0) CHECK((mixed.row(r) - g_only.row(r)).cwiseAbs().maxCoeff() <= 1e-12);

    std::vector<EntityTokens<double>> bad{{rndd(2, E, rng), rndd(3, E, rng), std::vector<double>(n - 1, 1.0)}};
    CHECK_THROWS_AS(site.forward(h, global, bad, p, {1.0, 0.0}), Error);
}

TEST_CASE("guided update is exactly local to each entity mask") {
    Rng rng(11);
    const int C = 4, E = 3, d = 5, cells = 8, n = cells * cells;
    const auto p = random_site(C, E, d, n, rng);
    const MD h = rndd(n, C, rng), global = rndd(2, E, rng);
    std::vector<EntityTokens<double>> ents{{rndd(2, E, rng), rndd(3, E, rng), box_mask_cells(0, 0, 3, 4, cells)},
                                           {rndd(1, E, rng), rndd(2, E, rng), box_mask_cells(4, 3, 8, 8, cells)}};
    const GuidanceWeightsPair w{0.7, 0.3};
    GuidanceSite<double> site;
    const MD base = site.forward(h, global, ents, p, w);

    int outside_checked = 0, inside_checked = 0;
    for (size_t i = 0; i < ents.size(); ++i) {
        for (int r = 0; r < n; ++r) {
            const bool inside = ents[i].mask[static_cast<size_t>(r)] != 0.0;
            for (int c = 0; c < C; ++c) {
                MD dout = MD::Zero(n, C);
                dout(r, c) = 1.0;
                const auto g = site.backward(dout, p);
                const double gnorm = g.text[i].cwiseAbs().maxCoeff() + g.image[i].cwiseAbs().maxCoeff();
                if (!inside) {
                    REQUIRE(gnorm == 0.0);
                    ++outside_checked;
                }
                if (c != 0) continue;
                // Finite differences over every token coordinate of entity i.
                for (int stream = 0; stream < 2; ++stream) {
                    const MD& tok = stream == 0 ? ents[i].text : ents[i].image;
                    const MD& an = stream == 0 ? g.text[i] : g.image[i];
                    for (Eigen::Index j = 0; j < tok.size(); ++j) {
                        auto plus = ents, minus = ents;
                        const double step = 1e-4;
                        (stream == 0 ? plus[i].text : plus[i].image).data()[j] += step;
                        (stream == 0 ? minus[i].text : minus[i].image).data()[j] -= step;
                        GuidanceSite<double> s2;
                        const double up = s2.forward(h, global, plus, p, w)(r, c);
                        const double dn = s2.forward(h, global, minus, p, w)(r, c);
                        const double fd = (up - dn) / (2 * step);
                        if (!inside) REQUIRE(fd == 0.0);
                        else REQUIRE(std::abs(fd - an.data()[j]) <= 1e-3 * std::max(1e-3, std::abs(an.data()[j])));
                    }
                }
                if (inside) ++inside_checked;
            }
        }
    }
    CHECK(outside_checked > 0);
    CHECK(inside_checked > 0);
    (void)base;
}

TEST_CASE("site backward matches finite differences for every input") {
    Rng rng(12);
    const int C = 3, E = 3, d = 4, cells = 4, n = cells * cells;
    auto p = random_site(C, E, d, n, rng);
    MD h = rndd(n, C, rng), global = rndd(2, E, rng);
    std::vector<EntityTokens<double>> ents{{rndd(2, E, rng), rndd(2, E, rng), box_mask_cells(0, 0, 2, 3, cells)}};
    const GuidanceWeightsPair w{0.6, 0.4};
    const MD dir = rndd(n, C, rng);
    auto objective = [&]() {
        GuidanceSite<double> s;
        return s.forward(h, global, ents, p, w).cwiseProduct(dir).sum();
    };
    GuidanceSite<double> site;
    site.forward(h, global, ents, p, w);
    const auto g = site.backward(dir, p);
    auto check = [&](MD& x, const MD& an) {
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const double keep = x.data()[j];
            x.data()[j] = keep + 1e-5;
            const double up = objective();
            x.data()[j] = keep - 1e-5;
            const double dn = objective();
            x.data()[j] = keep;
            REQUIRE(std::abs((up - dn) / 2e-5 - an.data()[j]) <= 1e-5 * std::max(1.0, std::abs(an.data()[j])));
        }
    };
    check(h, g.h);
    check(global, g.global);
    check(p.wq, g.wq);
    check(p.pq, g.pq);
    check(p.wkg, g.wkg);
    check(p.wvg, g.wvg);
    check(p.wkl, g.wkl);
    check(p.wvl, g.wvl);
    check(p.wo, g.wo);
    check(ents[0].text, g.text[0]);
    check(ents[0].image, g.image[0]);
}

TEST_CASE("DDPM posterior step with true noise recovers the clean input") {
    const NoiseSchedule s{DiffusionConfig{}};
    CHECK(s.alpha_bar[0] == 1.0);
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 1 + static_cast<int>(rng.below(200));
        std::vector<double> x0(64), eps(64);
        for (auto& v : x0) v = rng.uniform(-1, 1);
        for (auto& v : eps) v = rng.normal();
        const auto xk = q_sample(x0, eps, k, s);
        const auto rec = predict_x0(xk, eps, k, s);
        for (size_t i = 0; i < x0.size(); ++i) REQUIRE(std::abs(rec[i] - x0[i]) <= 1e-5);
        const auto x1 = q_sample(x0, eps, 1, s);
        const auto back = posterior_mean(x1, predict_x0(x1, eps, 1, s), 1, s);
        for (size_t i = 0; i < x0.size(); ++i) REQUIRE(std::abs(back[i] - x0[i]) <= 1e-5);
    }
}

TEST_CASE("bundle masks and tokens derive from the scene") {
    const auto g = small_grammar();
    const DiffusionConfig cfg;
    const auto scene = generate_scene(3, g);
    const auto b = make_bundle(scene, GuidanceMode::Combined, g, cfg);
    REQUIRE(b.entities.size() == scene.entities.size());
    for (size_t i = 0; i < b.entities.size(); ++i) {
        const auto& e = b.entities[i];
        CHECK(e.text_ids.size() == 3);
        CHECK(e.image_patches.rows() == static_cast<Eigen::Index>(e.patch_positions.size()));
        CHECK(e.image_patches.rows() > 0);
        for (float m : e.mask_hidden) CHECK((m == 0.0f || m == 1.0f));
        // Oracle: at least half of the cell's 2 x 2 pixel footprint is inside the box.
        const auto pix = box_mask(scene.entities[i].box, 32, 32);
        for (int cy = 0; cy < kHidden; ++cy)
            for (int cx = 0; cx < kHidden; ++cx) {
                int covered = 0;
                for (int y = 2 * cy; y < 2 * cy + 2; ++y)
                    for (int x = 2 * cx; x < 2 * cx + 2; ++x) covered += pix.at(y, x) ? 1 : 0;
                CHECK((e.mask_hidden[static_cast<size_t>(cy * kHidden + cx)] == 1.0f) == (covered >= 2));
            }
    }
    const auto again = make_bundle(scene, GuidanceMode::Combined, g, cfg);
    CHECK(again.entities[0].image_patches == b.entities[0].image_patches);
    CHECK(make_bundle(scene, GuidanceMode::GlobalOnly, g, cfg).entities.empty());
    CHECK(make_bundle(scene, GuidanceMode::LocalText, g, cfg).entities[0].image_patches.rows() == 0);
    CHECK(make_bundle(scene, GuidanceMode::LocalImage, g, cfg).entities[0].text_ids.empty());

    const Box half{0.25, 0.25, 0.75, 0.75};
    const auto m = downsample_mask(half, 32, 8);
    int count = 0;
    for (float v : m) count += v == 1.0f;
    CHECK(count == 16);
}

TEST_CASE("pixel unshuffle round trip") {
    Rng rng(14);
    std::vector<float> img(32 * 32 * 3);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    const Mat m = pixel_unshuffle(img, 32);
    CHECK(m.rows() == 256);
    CHECK(m.cols() == 12);
    CHECK(m(0, 3) == img[3]);  // pixel (0, 1), channel 0
    CHECK(pixel_shuffle(m, 32) == img);
}

TEST_CASE("denoiser memorizes a single image and training is deterministic") {
    const auto g = small_grammar();
    const auto cfg = short_schedule();
    const auto scene = generate_scene(5, g);
    const std::vector<TrainSample> data{{scene, render_scene(scene, g)}};
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 1;
    tc.seed = 3;
    Denoiser a(g, cfg, 1);
    const auto log = train_denoiser(a, data, tc);
    REQUIRE(log.epoch_loss.size() == 200);
    auto smooth = [&](size_t from) {
        double s = 0;
        for (size_t i = from; i < from + 20; ++i) s += log.epoch_loss[i];
        return s / 20;
    };
    CHECK(smooth(180) < smooth(0));

    tc.epochs = 5;
    Denoiser b(g, cfg, 1), c(g, cfg, 1);
    train_denoiser(b, data, tc);
    train_denoiser(c, data, tc);
    CHECK(b.params().checksum() == c.params().checksum());
}

TEST_CASE("resumed training reproduces an uninterrupted run") {
    const auto g = small_grammar();
    const auto cfg = short_schedule();
    std::vector<TrainSample> data;
    for (uint64_t s = 0; s < 3; ++s) {
        const auto scene = generate_scene(s, g);
        data.push_back({scene, render_scene(scene, g)});
    }
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 2;
    tc.seed = 9;
    Denoiser full(g, cfg, 2);
    train_denoiser(full, data, tc);

    const auto path = (std::filesystem::temp_directory_path() / "cfgen_test_resume.ckpt").string();
    Denoiser part(g, cfg, 2);
    TrainConfig first = tc;
    first.epochs = 2;
    const auto log = train_denoiser(part, data, first);
    part.save(path, {{"steps", log.steps}, {"epochs_done", log.epochs_done}}, true);
    json meta;
    Denoiser resumed = Denoiser::load(path, &meta, true);
    TrainLog r;
    r.steps = meta["steps"];
    r.epochs_done = meta["epochs_done"];
    train_denoiser(resumed, data, tc, r);
    CHECK(resumed.params().checksum() == full.params().checksum());
    std::filesystem::remove(path);
}

TEST_CASE("sampling is deterministic and respects the collage identity") {
    const auto g = small_grammar();
    const auto cfg = short_schedule();
    const auto scene = generate_scene(6, g);
    Denoiser model(g, cfg, 4);
    const auto bundle = make_bundle(scene, GuidanceMode::Combined, g, cfg);
    CHECK_THROWS_AS(sample_guided(model, bundle, 1), Error);

    model.set_trained(true);
    const auto a = sample_guided(model, bundle, 11);
    const auto b = sample_guided(model, bundle, 11);
    CHECK(a == b);
    CHECK(!(a == sample_guided(model, bundle, 12)));

    SampleOptions opts;
    opts.init = compose_collage(scene, g);
    opts.init_steps = 0;
    CHECK(sample_guided(model, bundle, 11, opts) == opts.init->image);
    opts.init_steps = cfg.total_steps + 1;
    CHECK_THROWS_AS(sample_guided(model, bundle, 11, opts), Error);
}

TEST_CASE("non-finite training loss raises a divergence error") {
    const auto g = small_grammar();
    const auto cfg = short_schedule();
    const auto scene = generate_scene(7, g);
    Denoiser model(g, cfg, 5);
    model.params().get("out.b").value(0, 0) = std::nanf("");
    TrainConfig tc;
    tc.epochs = 1;
    try {
        train_denoiser(model, {{scene, render_scene(scene, g)}}, tc);
        FAIL("expected divergence");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Divergence);
    }
    CHECK_THROWS_AS(train_denoiser(model, {}, tc), Error);
}

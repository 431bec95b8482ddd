#include "cfgen/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace cfgen {

// ---- configuration and schedule ------------------------------------------------

void DiffusionConfig::validate() const {
    if (total_steps < 2) fail(ErrorKind::Config, "total_steps must be at least 2");
    if (!(threshold_step > 0 && threshold_step < total_steps)) fail(ErrorKind::Config, "need 0 < threshold_step < total_steps");
    if (!(w_max > 0)) fail(ErrorKind::Config, "w_max must be positive");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        fail(ErrorKind::Config, "need 0 < beta_start <= beta_end < 1");
    if (image_size != 32) fail(ErrorKind::Config, "the denoiser is built for 32x32 images");
}

void to_json(json& j, const DiffusionConfig& c) {
    j = json{{"total_steps", c.total_steps}, {"threshold_step", c.threshold_step}, {"w_max", c.w_max},
             {"beta_start", c.beta_start},   {"beta_end", c.beta_end},             {"image_size", c.image_size}};
}

DiffusionConfig diffusion_config_from_json(const json& j) {
    DiffusionConfig c;
    bool threshold_given = false;
    for (const auto& [key, v] : j.items()) {
        if (key == "total_steps") c.total_steps = v.get<int>();
        else if (key == "threshold_step") c.threshold_step = v.get<int>(), threshold_given = true;
        else if (key == "w_max") c.w_max = v.get<double>();
        else if (key == "beta_start") c.beta_start = v.get<double>();
        else if (key == "beta_end") c.beta_end = v.get<double>();
        else if (key == "image_size") c.image_size = v.get<int>();
        else fail(ErrorKind::Config, "unknown diffusion config key: " + key);
    }
    if (!threshold_given) c.threshold_step = c.total_steps / 2;
    c.validate();
    return c;
}

GuidanceWeightsPair guidance_weights(int t, const DiffusionConfig& cfg) {
    if (t < 0 || t > cfg.total_steps)
        fail(ErrorKind::Range, "step " + std::to_string(t) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
    GuidanceWeightsPair w;
    if (t <= cfg.threshold_step) {
        w.local = cfg.w_max;
    } else {
        w.local = cfg.w_max * (1.0 - static_cast<double>(t - cfg.threshold_step) /
                                         static_cast<double>(cfg.total_steps - cfg.threshold_step));
    }
    w.global = cfg.w_max - w.local;
    return w;
}

NoiseSchedule::NoiseSchedule(const DiffusionConfig& cfg) {
    const int T = cfg.total_steps;
    beta.assign(static_cast<size_t>(T) + 1, 0.0);
    alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    for (int k = 1; k <= T; ++k) {
        beta[k] = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (k - 1) / static_cast<double>(T - 1);
        alpha[k] = 1.0 - beta[k];
        alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
    }
}

double NoiseSchedule::posterior_variance(int k) const {
    return beta[k] * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]);
}

std::vector<double> q_sample(const std::vector<double>& x0, const std::vector<double>& eps, int k,
                             const NoiseSchedule& s) {
    if (x0.size() != eps.size()) fail(ErrorKind::Shape, "x0 and noise sizes differ");
    const double a = std::sqrt(s.alpha_bar[k]), b = std::sqrt(1.0 - s.alpha_bar[k]);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

std::vector<double> predict_x0(const std::vector<double>& xk, const std::vector<double>& eps, int k,
                               const NoiseSchedule& s) {
    const double a = std::sqrt(s.alpha_bar[k]), b = std::sqrt(1.0 - s.alpha_bar[k]);
    std::vector<double> out(xk.size());
    for (size_t i = 0; i < xk.size(); ++i) out[i] = (xk[i] - b * eps[i]) / a;
    return out;
}

std::vector<double> posterior_mean(const std::vector<double>& xk, const std::vector<double>& x0, int k,
                                   const NoiseSchedule& s) {
    const double c0 = std::sqrt(s.alpha_bar[k - 1]) * s.beta[k] / (1.0 - s.alpha_bar[k]);
    const double ck = std::sqrt(s.alpha[k]) * (1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k]);
    std::vector<double> out(xk.size());
    for (size_t i = 0; i < xk.size(); ++i) out[i] = c0 * x0[i] + ck * xk[i];
    return out;
}

// ---- guidance bundles --------------------------------------------------------------

std::string_view to_string(GuidanceMode mode) {
    switch (mode) {
        case GuidanceMode::Combined: return "combined";
        case GuidanceMode::LocalText: return "local_text";
        case GuidanceMode::LocalImage: return "local_image";
        case GuidanceMode::GlobalOnly: return "global_only";
    }
    return "unknown";
}

GuidanceMode guidance_mode_from_string(std::string_view name) {
    for (auto m : kAllGuidanceModes)
        if (to_string(m) == name) return m;
    fail(ErrorKind::Config, "unknown guidance mode: " + std::string(name));
}

std::vector<float> downsample_mask(const Box& box, int image_size, int cells) {
    const double cs = static_cast<double>(image_size) / cells;
    const double bx0 = box.x0 * image_size, bx1 = box.x1 * image_size;
    const double by0 = box.y0 * image_size, by1 = box.y1 * image_size;
    std::vector<float> m(static_cast<size_t>(cells) * cells, 0.0f);
    for (int cy = 0; cy < cells; ++cy)
        for (int cx = 0; cx < cells; ++cx) {
            const double ox = std::max(0.0, std::min(bx1, (cx + 1) * cs) - std::max(bx0, cx * cs));
            const double oy = std::max(0.0, std::min(by1, (cy + 1) * cs) - std::max(by0, cy * cs));
            if (ox * oy >= 0.5 * cs * cs) m[static_cast<size_t>(cy) * cells + cx] = 1.0f;
        }
    return m;
}

GuidanceBundle make_bundle(const SceneSpec& scene, GuidanceMode mode, const GrammarConfig& grammar,
                           const DiffusionConfig& cfg) {
    const Vocabulary vocab(grammar);
    const int size = cfg.image_size;
    GuidanceBundle b;
    b.mode = mode;
    b.global_ids = vocab.ids(render_caption(scene));
    if (mode == GuidanceMode::GlobalOnly) return b;
    const bool text = mode != GuidanceMode::LocalImage;
    const bool image = mode != GuidanceMode::LocalText;
    const int grid = size / kPatch;
    for (const auto& e : scene.entities) {
        EntityGuidance g;
        g.entity_id = e.id;
        if (text) g.text_ids = vocab.ids(e.local_caption());
        g.image_patches.resize(0, kPatch * kPatch * 3);
        if (image) {
            SceneSpec single;
            single.entities.push_back(e);
            const auto collage = compose_collage(single, grammar, size);
            const auto& mask = collage.entity_masks[0];
            std::vector<float> rows;
            for (int py = 0; py < grid; ++py)
                for (int px = 0; px < grid; ++px) {
                    bool touches = false;
                    for (int y = py * kPatch; y < (py + 1) * kPatch && !touches; ++y)
                        for (int x = px * kPatch; x < (px + 1) * kPatch; ++x)
                            if (mask.at(y, x)) {
                                touches = true;
                                break;
                            }
                    if (!touches) continue;
                    g.patch_positions.push_back(py * grid + px);
                    for (int y = py * kPatch; y < (py + 1) * kPatch; ++y)
                        for (int x = px * kPatch; x < (px + 1) * kPatch; ++x)
                            for (int c = 0; c < 3; ++c) rows.push_back(2.0f * collage.image.at(y, x, c) - 1.0f);
                }
            g.image_patches = Eigen::Map<Mat>(rows.data(), static_cast<Eigen::Index>(g.patch_positions.size()),
                                              kPatch * kPatch * 3);
        }
        g.mask_hidden = downsample_mask(e.box, size, kHidden);
        g.mask_bottleneck = downsample_mask(e.box, size, kBottleneck);
        b.entities.push_back(std::move(g));
    }
    return b;
}

json bundle_manifest(const SceneSpec& scene, GuidanceMode mode) {
    return json{{"scene", scene}, {"mode", std::string(to_string(mode))}, {"reference", "render_entity_reference"}};
}

GuidanceWeightsPair bundle_weights(const GuidanceBundle& bundle, int t, const DiffusionConfig& cfg) {
    if (bundle.mode == GuidanceMode::GlobalOnly || bundle.entities.empty()) {
        if (t < 0 || t > cfg.total_steps) fail(ErrorKind::Range, "step outside [0, T]");
        return {0.0, cfg.w_max};
    }
    return guidance_weights(t, cfg);
}

Mat pixel_unshuffle(const std::vector<float>& hwc, int size) {
    const int h = size / 2;
    Mat out(h * h, 12);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                out((y / 2) * h + x / 2, ((y % 2) * 2 + (x % 2)) * 3 + c) = hwc[(static_cast<size_t>(y) * size + x) * 3 + c];
    return out;
}

std::vector<float> pixel_shuffle(const Mat& m, int size) {
    const int h = size / 2;
    std::vector<float> out(static_cast<size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                out[(static_cast<size_t>(y) * size + x) * 3 + c] = m((y / 2) * h + x / 2, ((y % 2) * 2 + (x % 2)) * 3 + c);
    return out;
}

// ---- denoiser ------------------------------------------------------------------------

namespace {

Mat sinusoid(int positions, int dim, int offset = 0) {
    Mat m(positions, dim);
    for (int p = 0; p < positions; ++p)
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
            m(p, 2 * i) = static_cast<float>(std::sin((p + offset) * freq));
            m(p, 2 * i + 1) = static_cast<float>(std::cos((p + offset) * freq));
        }
    return m;
}

Mat time_features(int k, int dim) {
    Mat m(1, dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
        m(0, 2 * i) = static_cast<float>(std::sin(k * freq));
        m(0, 2 * i + 1) = static_cast<float>(std::cos(k * freq));
    }
    return m;
}

}  // namespace

Denoiser::Denoiser(const GrammarConfig& grammar, const DiffusionConfig& cfg, uint64_t seed, DenoiserShape shape)
    : grammar_(grammar), cfg_(cfg), shape_(shape), vocab_(grammar) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0xd1ff));
    const int E = shape.embed, d = shape.key_dim, C = shape.base, M = shape.mid, TD = shape.time_dim;
    auto he = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, std::sqrt(2.0f / fan_in), rng); };
    auto zeros = [](int r, int c) { return Mat(Mat::Zero(r, c)); };

    params_.add("tok_emb", randn(vocab_.size(), E, 0.5f, rng));
    params_.add("patch_proj", randn(kPatch * kPatch * 3, E, 1.0f / std::sqrt(48.0f), rng));
    params_.add("patch_pos", randn((cfg_.image_size / kPatch) * (cfg_.image_size / kPatch), E, 0.5f, rng));
    params_.add("time.w1", he(64, TD));
    params_.add("time.b1", zeros(1, TD));
    params_.add("time.w2", he(TD, TD));
    params_.add("time.b2", zeros(1, TD));
    params_.add("conv_in.w", he(9 * 12, C));
    params_.add("conv_in.b", zeros(1, C));
    auto add_res = [&](const std::string& n, int ch) {
        params_.add(n + ".c1.w", he(9 * ch, ch));
        params_.add(n + ".c1.b", zeros(1, ch));
        params_.add(n + ".t.w", randn(TD, ch, 0.02f, rng));
        params_.add(n + ".t.b", zeros(1, ch));
        params_.add(n + ".c2.w", zeros(9 * ch, ch));
        params_.add(n + ".c2.b", zeros(1, ch));
    };
    auto add_site = [&](const std::string& n, int ch, int cells) {
        params_.add(n + ".wq", randn(ch, d, 1.0f / std::sqrt(static_cast<float>(ch)), rng));
        params_.add(n + ".pq", randn(cells * cells, d, 0.5f, rng));
        params_.add(n + ".wkg", randn(E, d, 1.0f / std::sqrt(static_cast<float>(E)), rng));
        params_.add(n + ".wvg", randn(E, d, 1.0f / std::sqrt(static_cast<float>(E)), rng));
        params_.add(n + ".wkl", randn(E, d, 1.0f / std::sqrt(static_cast<float>(E)), rng));
        params_.add(n + ".wvl", randn(E, d, 1.0f / std::sqrt(static_cast<float>(E)), rng));
        params_.add(n + ".wo", randn(d, ch, 0.02f, rng));
    };
    add_res("res16a", C);
    params_.add("down.w", he(9 * C, M));
    params_.add("down.b", zeros(1, M));
    add_res("res8", M);
    add_site("site8", M, kBottleneck);
    params_.add("merge.w", he(M + C, C));
    params_.add("merge.b", zeros(1, C));
    add_res("res16b", C);
    add_site("site16", C, kHidden);
    params_.add("out.w", randn(9 * C, 12, 0.02f, rng));
    params_.add("out.b", zeros(1, 12));
}

Tape::Var Denoiser::resblock(Tape& tape, Tape::Var x, int hw, const std::string& n, Tape::Var temb) {
    auto P = [&](const std::string& s) { return tape.param(params_.get(n + s)); };
    Tape::Var h = tape.conv2d(tape.silu(x), hw, hw, P(".c1.w"), P(".c1.b"), 3, 1);
    Tape::Var tb = tape.add(tape.matmul(temb, P(".t.w")), P(".t.b"));
    h = tape.add_row(h, tb);
    h = tape.conv2d(tape.silu(h), hw, hw, P(".c2.w"), P(".c2.b"), 3, 1);
    return tape.add(x, h);
}

Tape::Var Denoiser::site(Tape& tape, Tape::Var h, const std::string& n, Tape::Var global,
                         const std::vector<std::pair<Tape::Var, Tape::Var>>& entity_tokens,
                         const GuidanceBundle& bundle, bool bottleneck, GuidanceWeightsPair w) {
    const Tape::Var wq = tape.param(params_.get(n + ".wq")), pq = tape.param(params_.get(n + ".pq")),
                    wkg = tape.param(params_.get(n + ".wkg")), wvg = tape.param(params_.get(n + ".wvg")),
                    wkl = tape.param(params_.get(n + ".wkl")), wvl = tape.param(params_.get(n + ".wvl")),
                    wo = tape.param(params_.get(n + ".wo"));
    SiteParams<float> p{tape.value(wq), tape.value(pq), tape.value(wkg), tape.value(wvg),
                        tape.value(wkl), tape.value(wvl), tape.value(wo)};
    std::vector<EntityTokens<float>> ents;
    for (size_t i = 0; i < entity_tokens.size(); ++i) {
        const auto& g = bundle.entities[i];
        ents.push_back({tape.value(entity_tokens[i].first), tape.value(entity_tokens[i].second),
                        bottleneck ? g.mask_bottleneck : g.mask_hidden});
    }
    auto op = std::make_shared<GuidanceSite<float>>();
    Mat out = op->forward(tape.value(h), tape.value(global), ents, p, w);
    return tape.custom(std::move(out), {}, [=, p = std::move(p)](Tape& t, const Mat& g) {
        const auto gr = op->backward(g, p);
        t.grad(h) += gr.h;
        t.grad(wq) += gr.wq;
        t.grad(pq) += gr.pq;
        t.grad(wkg) += gr.wkg;
        t.grad(wvg) += gr.wvg;
        t.grad(wkl) += gr.wkl;
        t.grad(wvl) += gr.wvl;
        t.grad(wo) += gr.wo;
        t.grad(global) += gr.global;
        for (size_t i = 0; i < entity_tokens.size(); ++i) {
            t.grad(entity_tokens[i].first) += gr.text[i];
            t.grad(entity_tokens[i].second) += gr.image[i];
        }
    });
}

Tape::Var Denoiser::forward(Tape& tape, const Mat& xk, int k, const GuidanceBundle& bundle, GuidanceWeightsPair w) {
    if (xk.rows() != kHidden * kHidden || xk.cols() != 12) fail(ErrorKind::Shape, "denoiser input must be [256 x 12]");
    auto P = [&](const std::string& s) { return tape.param(params_.get(s)); };
    const int E = shape_.embed;

    Tape::Var temb = tape.constant(time_features(k, 64));
    temb = tape.silu(tape.add(tape.matmul(temb, P("time.w1")), P("time.b1")));
    temb = tape.silu(tape.add(tape.matmul(temb, P("time.w2")), P("time.b2")));

    const Tape::Var emb = P("tok_emb");
    const Tape::Var global = tape.add(tape.gather_rows(emb, bundle.global_ids),
                                      tape.constant(sinusoid(static_cast<int>(bundle.global_ids.size()), E)));
    std::vector<std::pair<Tape::Var, Tape::Var>> entity_tokens;
    if (!bundle.entities.empty()) {
        const Tape::Var proj = P("patch_proj"), ppos = P("patch_pos");
        for (const auto& g : bundle.entities) {
            Tape::Var text = tape.add(tape.gather_rows(emb, g.text_ids),
                                      tape.constant(sinusoid(static_cast<int>(g.text_ids.size()), E)));
            Tape::Var image = tape.add(tape.matmul(tape.constant(g.image_patches), proj),
                                       tape.gather_rows(ppos, g.patch_positions));
            entity_tokens.emplace_back(text, image);
        }
    }

    Tape::Var h = tape.conv2d(tape.constant(xk), kHidden, kHidden, P("conv_in.w"), P("conv_in.b"), 3, 1);
    h = resblock(tape, h, kHidden, "res16a", temb);
    const Tape::Var skip = h;
    Tape::Var d = tape.conv2d(h, kHidden, kHidden, P("down.w"), P("down.b"), 3, 2);
    d = resblock(tape, d, kBottleneck, "res8", temb);
    d = site(tape, d, "site8", global, entity_tokens, bundle, true, w);
    Tape::Var u = tape.concat_cols(tape.upsample2x(d, kBottleneck, kBottleneck), skip);
    u = tape.add_row(tape.matmul(u, P("merge.w")), P("merge.b"));
    u = resblock(tape, u, kHidden, "res16b", temb);
    u = site(tape, u, "site16", global, entity_tokens, bundle, false, w);
    return tape.conv2d(tape.silu(u), kHidden, kHidden, P("out.w"), P("out.b"), 3, 1);
}

Mat Denoiser::predict(const Mat& xk, int k, const GuidanceBundle& bundle, GuidanceWeightsPair w) {
    Tape tape;
    const Tape::Var out = forward(tape, xk, k, bundle, w);
    return tape.value(out);
}

void Denoiser::save(const std::string& path, const json& extra_meta, bool with_adam) const {
    json meta = extra_meta;
    meta["format"] = "cfgen-denoiser";
    meta["tool_version"] = std::string(kVersion);
    meta["diffusion"] = cfg_;
    meta["grammar"] = grammar_;
    meta["shape"] = {{"base", shape_.base}, {"mid", shape_.mid}, {"embed", shape_.embed},
                     {"key_dim", shape_.key_dim}, {"time_dim", shape_.time_dim}};
    meta["trained"] = trained_;
    meta["with_adam"] = with_adam;
    save_checkpoint(path, meta, export_params(params_, with_adam));
}

Denoiser Denoiser::load(const std::string& path, json* meta_out, bool with_adam) {
    auto [meta, tensors] = load_checkpoint(path);
    if (meta.value("format", "") != "cfgen-denoiser") fail(ErrorKind::Io, path + " is not a denoiser checkpoint");
    DenoiserShape shape;
    const auto& s = meta.at("shape");
    shape.base = s.at("base");
    shape.mid = s.at("mid");
    shape.embed = s.at("embed");
    shape.key_dim = s.at("key_dim");
    shape.time_dim = s.at("time_dim");
    Denoiser model(grammar_config_from_json(meta.at("grammar")), diffusion_config_from_json(meta.at("diffusion")), 0, shape);
    import_params(model.params_, tensors, with_adam && meta.value("with_adam", false));
    model.trained_ = meta.value("trained", false);
    if (meta_out) *meta_out = meta;
    return model;
}

// ---- training ---------------------------------------------------------------------------

namespace {

GuidanceBundle restrict_bundle(const GuidanceBundle& full, GuidanceMode mode) {
    GuidanceBundle b;
    b.mode = mode;
    b.global_ids = full.global_ids;
    if (mode == GuidanceMode::GlobalOnly) return b;
    b.entities = full.entities;
    for (auto& e : b.entities) {
        if (mode == GuidanceMode::LocalImage) e.text_ids.clear();
        if (mode == GuidanceMode::LocalText) {
            e.image_patches.resize(0, e.image_patches.cols());
            e.patch_positions.clear();
        }
    }
    return b;
}

std::vector<float> scaled_pixels(const Image& img) {
    std::vector<float> out(img.pixels.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 2.0f * img.pixels[i] - 1.0f;
    return out;
}

}  // namespace

TrainLog train_denoiser(Denoiser& model, const std::vector<TrainSample>& data, const TrainConfig& tc, TrainLog log,
                        const std::function<void(const Denoiser&, const TrainLog&)>& on_epoch) {
    if (data.empty()) fail(ErrorKind::Input, "training set is empty");
    const auto& cfg = model.config();
    const int T = cfg.total_steps;
    const int size = cfg.image_size;
    const NoiseSchedule sched(cfg);
    std::vector<GuidanceBundle> bundles;
    std::vector<std::vector<float>> x0s;
    for (const auto& s : data) {
        if (s.image.height != size || s.image.width != size) fail(ErrorKind::Shape, "training image has the wrong size");
        bundles.push_back(make_bundle(s.scene, GuidanceMode::Combined, model.grammar(), cfg));
        x0s.push_back(scaled_pixels(s.image));
    }
    double mix_total = 0;
    for (double p : tc.condition_mix) mix_total += p;
    const AdamConfig adam{tc.lr, 0.9, 0.999, 1e-8, 0.0, tc.grad_clip};
    const std::array<GuidanceMode, 4> modes = {GuidanceMode::Combined, GuidanceMode::LocalText, GuidanceMode::LocalImage,
                                               GuidanceMode::GlobalOnly};

    for (int epoch = log.epochs_done; epoch < tc.epochs; ++epoch) {
        Rng rng(derive_seed(tc.seed, 0xe90c, static_cast<uint64_t>(epoch)));
        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        double epoch_sum = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tc.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
            model.params().zero_grad();
            double batch_sum = 0;
            for (size_t bi = start; bi < end; ++bi) {
                const size_t idx = order[bi];
                const int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(T)));
                double u = rng.uniform() * mix_total;
                size_t mi = 0;
                while (mi + 1 < modes.size() && u >= tc.condition_mix[mi]) u -= tc.condition_mix[mi++];
                const GuidanceBundle bundle = restrict_bundle(bundles[idx], modes[mi]);
                std::vector<float> eps(x0s[idx].size());
                for (auto& e : eps) e = static_cast<float>(rng.normal());
                const float a = static_cast<float>(std::sqrt(sched.alpha_bar[k]));
                const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bar[k]));
                std::vector<float> xk(eps.size());
                for (size_t i = 0; i < xk.size(); ++i) xk[i] = a * x0s[idx][i] + b * eps[i];

                Tape tape;
                const Tape::Var pred = model.forward(tape, pixel_unshuffle(xk, size), k, bundle,
                                                     bundle_weights(bundle, T - k, cfg));
                const Tape::Var loss = tape.mse(pred, pixel_unshuffle(eps, size));
                const double lv = tape.value(loss)(0, 0);
                if (!std::isfinite(lv)) fail(ErrorKind::Divergence, "non-finite denoiser loss at step " + std::to_string(log.steps), log.steps);
                batch_sum += lv;
                Mat seed(1, 1);
                seed(0, 0) = 1.0f / static_cast<float>(end - start);
                tape.backward(loss, seed);
            }
            ++log.steps;
            adam_step(model.params(), adam, log.steps);
            epoch_sum += batch_sum;
        }
        log.epoch_loss.push_back(epoch_sum / static_cast<double>(data.size()));
        log.epochs_done = epoch + 1;
        model.set_trained(true);
        if (on_epoch) on_epoch(model, log);
    }
    return log;
}

// ---- sampling ------------------------------------------------------------------------------

Image sample_guided(const Denoiser& model, const GuidanceBundle& bundle, uint64_t seed, const SampleOptions& opts) {
    if (!model.trained()) fail(ErrorKind::State, "denoiser has not been trained or loaded from a trained checkpoint");
    const auto& cfg = model.config();
    const int T = cfg.total_steps, size = cfg.image_size;
    const NoiseSchedule sched(cfg);
    Rng rng(derive_seed(seed, 0x5a3b));

    int start = T;
    std::vector<double> x(static_cast<size_t>(size) * size * 3);
    if (opts.init) {
        const Image& c = opts.init->image;
        if (c.height != size || c.width != size) fail(ErrorKind::Shape, "collage size does not match the denoiser");
        start = opts.init_steps.value_or(T);
        if (start < 0 || start > T) fail(ErrorKind::Range, "init_steps outside [0, T]");
        if (start == 0) return c;
        const double a = std::sqrt(sched.alpha_bar[start]), b = std::sqrt(1.0 - sched.alpha_bar[start]);
        for (size_t i = 0; i < x.size(); ++i) x[i] = a * (2.0 * c.pixels[i] - 1.0) + b * rng.normal();
    } else {
        for (auto& v : x) v = rng.normal();
    }

    auto& m = const_cast<Denoiser&>(model);  // forward only reads parameters here
    std::vector<float> xf(x.size());
    for (int k = start; k >= 1; --k) {
        const int t = T - k;
        for (size_t i = 0; i < x.size(); ++i) xf[i] = static_cast<float>(x[i]);
        const Mat eps_m = m.predict(pixel_unshuffle(xf, size), k, bundle, bundle_weights(bundle, t, cfg));
        const std::vector<float> eps_f = pixel_shuffle(eps_m, size);
        const std::vector<double> eps(eps_f.begin(), eps_f.end());
        std::vector<double> x0 = predict_x0(x, eps, k, sched);
        for (auto& v : x0) v = std::clamp(v, -1.0, 1.0);
        x = posterior_mean(x, x0, k, sched);
        if (k > 1) {
            const double sigma = std::sqrt(sched.posterior_variance(k));
            for (auto& v : x) v += sigma * rng.normal();
        }
    }
    Image out(size, size);
    for (size_t i = 0; i < x.size(); ++i) out.pixels[i] = static_cast<float>(std::clamp((x[i] + 1.0) / 2.0, 0.0, 1.0));
    return out;
}

Image generate_image(const Denoiser& model, const SceneSpec& scene, GuidanceMode mode, uint64_t seed,
                     int collage_init_steps) {
    const auto bundle = make_bundle(scene, mode, model.grammar(), model.config());
    SampleOptions opts;
    if (collage_init_steps >= 0 && (mode == GuidanceMode::Combined || mode == GuidanceMode::LocalImage)) {
        opts.init = compose_collage(scene, model.grammar(), model.config().image_size);
        opts.init_steps = std::min(collage_init_steps, model.config().total_steps);
    }
    return sample_guided(model, bundle, seed, opts);
}

}  // namespace cfgen

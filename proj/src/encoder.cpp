#include "cfgen/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace cfgen {

void to_json(json& j, const EncoderConfig& c) {
    j = json{{"embed", c.embed}, {"text_width", c.text_width}, {"text_layers", c.text_layers}, {"image_size", c.image_size}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "embed") c.embed = v.get<int>();
        else if (key == "text_width") c.text_width = v.get<int>();
        else if (key == "text_layers") c.text_layers = v.get<int>();
        else if (key == "image_size") c.image_size = v.get<int>();
        else fail(ErrorKind::Config, "unknown encoder config key: " + key);
    }
    if (c.embed < 1 || c.text_width < 2 || c.text_width % 2 || c.text_layers < 0)
        fail(ErrorKind::Config, "invalid encoder dimensions");
    if (c.image_size != 32) fail(ErrorKind::Config, "the image encoder is built for 32x32 images");
    return c;
}

void to_json(json& j, const AdapterConfig& c) {
    j = json{{"rank", c.rank}, {"alpha", c.alpha}, {"targets", c.targets}};
}

AdapterConfig adapter_config_from_json(const json& j) {
    AdapterConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "rank") c.rank = v.get<int>();
        else if (key == "alpha") c.alpha = v.get<double>();
        else if (key == "targets") c.targets = v.get<std::vector<std::string>>();
        else fail(ErrorKind::Config, "unknown adapter config key: " + key);
    }
    if (c.rank < 1) fail(ErrorKind::Config, "adapter rank must be at least 1");
    return c;
}

namespace {

Mat positions(int n, int dim) {
    Mat m(n, dim);
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
            m(p, 2 * i) = static_cast<float>(std::sin(p * freq));
            m(p, 2 * i + 1) = static_cast<float>(std::cos(p * freq));
        }
    return m;
}

bool is_weight(const std::string& name) { return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0; }

}  // namespace

DualEncoder DualEncoder::clone() const {
    DualEncoder e(grammar_, cfg_, 0);
    e.params_ = params_.clone();
    e.weights_ = weights_;
    e.adapters_ = adapters_;
    return e;
}

DualEncoder::DualEncoder(const GrammarConfig& grammar, const EncoderConfig& cfg, uint64_t seed)
    : grammar_(grammar), cfg_(cfg), vocab_(grammar) {
    Rng rng(derive_seed(seed, 0xe4c0));
    const int E = cfg.embed, W = cfg.text_width;
    auto he = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, std::sqrt(2.0f / fan_in), rng); };
    auto lin = [&](int fan_in, int fan_out) { return randn(fan_in, fan_out, 1.0f / std::sqrt(static_cast<float>(fan_in)), rng); };
    auto zeros = [](int r, int c) { return Mat(Mat::Zero(r, c)); };
    auto ones = [](int r, int c) { return Mat(Mat::Ones(r, c)); };

    params_.add("img.c1.w", he(27, 32));
    params_.add("img.c1.b", zeros(1, 32));
    params_.add("img.c2.w", he(9 * 32, 64));
    params_.add("img.c2.b", zeros(1, 64));
    params_.add("img.c3.w", he(9 * 64, 64));
    params_.add("img.c3.b", zeros(1, 64));
    params_.add("img.head.w", lin(16 * 64, E));
    params_.add("img.head.b", zeros(1, E));

    params_.add("txt.emb", randn(vocab_.size(), W, 1.0f, rng));
    for (int l = 0; l < cfg.text_layers; ++l) {
        const std::string p = "txt.l" + std::to_string(l) + ".";
        params_.add(p + "ln1.g", ones(1, W));
        params_.add(p + "ln1.b", zeros(1, W));
        for (const char* n : {"q", "k", "v", "o"}) params_.add(p + "attn." + n + ".w", lin(W, W));
        params_.add(p + "ln2.g", ones(1, W));
        params_.add(p + "ln2.b", zeros(1, W));
        params_.add(p + "mlp1.w", he(W, 2 * W));
        params_.add(p + "mlp1.b", zeros(1, 2 * W));
        params_.add(p + "mlp2.w", lin(2 * W, W));
        params_.add(p + "mlp2.b", zeros(1, W));
    }
    params_.add("txt.lnf.g", ones(1, W));
    params_.add("txt.lnf.b", zeros(1, W));
    params_.add("txt.head.w", lin(W, E));
    params_.add("txt.head.b", zeros(1, E));

    for (const auto& p : params_.all())
        if (is_weight(p->name)) weights_.push_back(p->name);
}

std::vector<std::string> DualEncoder::weight_names() const { return weights_; }

Tape::Var DualEncoder::weight(Tape& tape, const std::string& name) {
    const Tape::Var base = tape.param(params_.get(name));
    if (!adapters_ || !params_.contains(name + ".lora_a")) return base;
    const Tape::Var delta = tape.matmul(tape.param(params_.get(name + ".lora_a")), tape.param(params_.get(name + ".lora_b")));
    return tape.add(base, tape.scale(delta, static_cast<float>(adapters_->alpha / adapters_->rank)));
}

Tape::Var DualEncoder::encode_images(Tape& tape, const std::vector<const Image*>& images) {
    if (images.empty()) fail(ErrorKind::Shape, "no images to encode");
    const int S = cfg_.image_size;
    auto P = [&](const std::string& n) { return tape.param(params_.get(n)); };
    const Tape::Var w1 = weight(tape, "img.c1.w"), w2 = weight(tape, "img.c2.w"), w3 = weight(tape, "img.c3.w"),
                    wh = weight(tape, "img.head.w");
    const Tape::Var b1 = P("img.c1.b"), b2 = P("img.c2.b"), b3 = P("img.c3.b"), bh = P("img.head.b");
    std::vector<Tape::Var> rows;
    for (const Image* img : images) {
        if (img->height != S || img->width != S) fail(ErrorKind::Shape, "image size does not match the encoder");
        Mat x(S * S, 3);
        for (int i = 0; i < S * S; ++i)
            for (int c = 0; c < 3; ++c) x(i, c) = 2.0f * img->pixels[static_cast<size_t>(i) * 3 + c] - 1.0f;
        Tape::Var h = tape.silu(tape.conv2d(tape.constant(std::move(x)), S, S, w1, b1, 3, 2));
        h = tape.silu(tape.conv2d(h, S / 2, S / 2, w2, b2, 3, 2));
        h = tape.silu(tape.conv2d(h, S / 4, S / 4, w3, b3, 3, 1));
        h = tape.avgpool(h, S / 4, S / 4, 2);
        rows.push_back(tape.reshape(h, 1, 16 * 64));
    }
    return tape.add_row(tape.matmul(tape.stack_rows(rows), wh), bh);
}

Tape::Var DualEncoder::text_layer(Tape& tape, Tape::Var x, const std::vector<Tape::Var>& w) {
    // w: ln1.g ln1.b q k v o ln2.g ln2.b mlp1.w mlp1.b mlp2.w mlp2.b
    const float inv = 1.0f / std::sqrt(static_cast<float>(cfg_.text_width));
    Tape::Var h = tape.layernorm(x, w[0], w[1]);
    const Tape::Var q = tape.matmul(h, w[2]), k = tape.matmul(h, w[3]), v = tape.matmul(h, w[4]);
    const Tape::Var a = tape.matmul(tape.softmax_rows(tape.scale(tape.matmul_nt(q, k), inv)), v);
    x = tape.add(x, tape.matmul(a, w[5]));
    h = tape.layernorm(x, w[6], w[7]);
    h = tape.silu(tape.add_row(tape.matmul(h, w[8]), w[9]));
    h = tape.add_row(tape.matmul(h, w[10]), w[11]);
    return tape.add(x, h);
}

Tape::Var DualEncoder::encode_texts(Tape& tape, const std::vector<Tokens>& captions) {
    if (captions.empty()) fail(ErrorKind::Shape, "no captions to encode");
    auto P = [&](const std::string& n) { return tape.param(params_.get(n)); };
    const Tape::Var emb = P("txt.emb");
    std::vector<std::vector<Tape::Var>> layers;
    for (int l = 0; l < cfg_.text_layers; ++l) {
        const std::string p = "txt.l" + std::to_string(l) + ".";
        layers.push_back({P(p + "ln1.g"), P(p + "ln1.b"), weight(tape, p + "attn.q.w"), weight(tape, p + "attn.k.w"),
                          weight(tape, p + "attn.v.w"), weight(tape, p + "attn.o.w"), P(p + "ln2.g"), P(p + "ln2.b"),
                          weight(tape, p + "mlp1.w"), P(p + "mlp1.b"), weight(tape, p + "mlp2.w"), P(p + "mlp2.b")});
    }
    const Tape::Var lnf_g = P("txt.lnf.g"), lnf_b = P("txt.lnf.b");
    std::vector<Tape::Var> pooled;
    for (const auto& caption : captions) {
        if (caption.empty()) fail(ErrorKind::Shape, "empty caption");
        const auto ids = vocab_.ids(caption);
        Tape::Var x = tape.add(tape.gather_rows(emb, ids), tape.constant(positions(static_cast<int>(ids.size()), cfg_.text_width)));
        for (const auto& w : layers) x = text_layer(tape, x, w);
        pooled.push_back(tape.mean_rows(tape.layernorm(x, lnf_g, lnf_b)));
    }
    return tape.add_row(tape.matmul(tape.stack_rows(pooled), weight(tape, "txt.head.w")), P("txt.head.b"));
}

// Inference only reads parameters, so the const overloads reuse the tape path.
Mat DualEncoder::encode_images(const std::vector<const Image*>& images) const {
    Tape tape;
    const auto v = const_cast<DualEncoder*>(this)->encode_images(tape, images);
    return tape.value(v);
}

Mat DualEncoder::encode_texts(const std::vector<Tokens>& captions) const {
    Tape tape;
    const auto v = const_cast<DualEncoder*>(this)->encode_texts(tape, captions);
    return tape.value(v);
}

std::vector<float> DualEncoder::encode_image(const Image& image) const {
    const Mat m = encode_images({&image});
    return {m.data(), m.data() + m.size()};
}

std::vector<float> DualEncoder::encode_text(const Tokens& caption) const {
    const Mat m = encode_texts({caption});
    return {m.data(), m.data() + m.size()};
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) fail(ErrorKind::Shape, "embedding dimensions differ");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (!(na > 0) || !(nb > 0) || !std::isfinite(na) || !std::isfinite(nb)) fail(ErrorKind::Degenerate, "zero-norm embedding");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double DualEncoder::similarity(const Image& image, const Tokens& caption) const {
    return cosine(encode_image(image), encode_text(caption));
}

void DualEncoder::apply_adapters(const AdapterConfig& cfg, uint64_t seed) {
    if (cfg.rank < 1) fail(ErrorKind::Config, "adapter rank must be at least 1");
    std::vector<std::string> targets = cfg.targets.empty() ? weights_ : cfg.targets;
    for (const auto& t : targets)
        if (std::find(weights_.begin(), weights_.end(), t) == weights_.end())
            fail(ErrorKind::Config, "unknown adapter target layer: " + t);
    for (const auto& w : weights_)
        if (params_.contains(w + ".lora_a")) {
            params_.remove(w + ".lora_a");
            params_.remove(w + ".lora_b");
        }
    Rng rng(derive_seed(seed, 0x10a));
    for (const auto& t : targets) {
        const Mat& base = params_.get(t).value;
        params_.add(t + ".lora_a", randn(static_cast<int>(base.rows()), cfg.rank, 1.0f / std::sqrt(static_cast<float>(base.rows())), rng));
        params_.add(t + ".lora_b", Mat::Zero(cfg.rank, base.cols()));
    }
    set_base_trainable(false);
    adapters_ = cfg;
}

void DualEncoder::set_base_trainable(bool trainable) {
    for (auto& p : params_.all())
        if (p->name.find(".lora_") == std::string::npos) p->trainable = trainable;
}

std::string DualEncoder::base_checksum() const {
    ParamStore base;
    for (const auto& p : params_.all())
        if (p->name.find(".lora_") == std::string::npos) base.add(p->name, p->value);
    return base.checksum();
}

void DualEncoder::save(const std::string& path, const json& extra_meta) const {
    json meta = extra_meta;
    meta["format"] = "cfgen-encoder";
    meta["tool_version"] = std::string(kVersion);
    meta["encoder"] = cfg_;
    meta["grammar"] = grammar_;
    if (adapters_) meta["adapters"] = *adapters_;
    save_checkpoint(path, meta, export_params(params_));
}

DualEncoder DualEncoder::load(const std::string& path, json* meta_out) {
    auto [meta, tensors] = load_checkpoint(path);
    if (meta.value("format", "") != "cfgen-encoder") fail(ErrorKind::Io, path + " is not an encoder checkpoint");
    DualEncoder enc(grammar_config_from_json(meta.at("grammar")), encoder_config_from_json(meta.at("encoder")), 0);
    if (meta.contains("adapters")) enc.apply_adapters(adapter_config_from_json(meta.at("adapters")), 0);
    import_params(enc.params_, tensors);
    if (meta_out) *meta_out = meta;
    return enc;
}

void DualEncoder::save_adapters(const std::string& path, const json& extra_meta) const {
    if (!adapters_) fail(ErrorKind::State, "encoder has no adapters to save");
    json meta = extra_meta;
    meta["format"] = "cfgen-adapters";
    meta["tool_version"] = std::string(kVersion);
    meta["base_checksum"] = base_checksum();
    meta["adapters"] = *adapters_;
    std::vector<NamedTensor> tensors;
    for (const auto& p : params_.all())
        if (p->name.find(".lora_") != std::string::npos) tensors.push_back({p->name, p->value});
    save_checkpoint(path, meta, tensors);
}

void DualEncoder::load_adapters(const std::string& path) {
    auto [meta, tensors] = load_checkpoint(path);
    if (meta.value("format", "") != "cfgen-adapters") fail(ErrorKind::Io, path + " is not an adapter overlay");
    if (meta.at("base_checksum") != base_checksum())
        fail(ErrorKind::Validation, "adapter overlay was trained on a different base checkpoint");
    apply_adapters(adapter_config_from_json(meta.at("adapters")), 0);
    std::map<std::string, const Mat*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;
    for (auto& p : params_.all()) {
        if (p->name.find(".lora_") == std::string::npos) continue;
        auto it = by_name.find(p->name);
        if (it == by_name.end()) fail(ErrorKind::Io, "overlay is missing tensor " + p->name);
        if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols())
            fail(ErrorKind::Shape, "overlay tensor " + p->name + " has the wrong shape");
        p->value = *it->second;
    }
}

}  // namespace cfgen
